//! Deterministic feature extraction from brain-tumour MRI label maps, findings
//! generation through a chat-completion endpoint, report evaluation and
//! survival statistics.

pub mod volume;
pub mod anatomy;
pub mod morph;
pub mod midline;
pub mod vasari;
pub mod llm;
pub mod reportgen;
pub mod texteval;
pub mod survival;
pub mod phantom;
