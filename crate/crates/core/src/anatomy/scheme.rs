use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Cerebral hemisphere in RAS terms (negative x is Left).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Hemisphere {
    Left,
    Right,
}

impl Hemisphere {
    pub fn as_str(self) -> &'static str {
        match self {
            Hemisphere::Left => "left",
            Hemisphere::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Lobe,
    Gyrus,
    Cortex,
    WhiteMatter,
    DeepGray,
    LateralVentricle,
    ThirdVentricle,
    FourthVentricle,
    Brainstem,
    Cerebellum,
    CorpusCallosum,
    Csf,
    Other,
}

impl RegionKind {
    pub fn is_ventricle(self) -> bool {
        matches!(
            self,
            RegionKind::LateralVentricle | RegionKind::ThirdVentricle | RegionKind::FourthVentricle
        )
    }

    /// Regions that can name a tumour location. White matter is attributed
    /// to the lobe of its nearest cortex instead.
    pub fn is_location(self) -> bool {
        matches!(
            self,
            RegionKind::Lobe
                | RegionKind::DeepGray
                | RegionKind::Brainstem
                | RegionKind::Cerebellum
                | RegionKind::CorpusCallosum
        )
    }
}

/// A named group of anatomy labels. Regions may overlap (a gyrus label is
/// also part of its lobe and of the cortex).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub labels: Vec<u32>,
    pub kind: RegionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<Hemisphere>,
}

/// Named anatomy regions over an integer label map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnatomyScheme {
    pub name: String,
    #[serde(rename = "region")]
    pub regions: Vec<Region>,
}

/// Tumour sub-region labels. Defaults follow the current BraTS convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TumorScheme {
    pub ncr: u32,
    pub ed: u32,
    pub et: u32,
}

impl Default for TumorScheme {
    fn default() -> Self {
        TumorScheme { ncr: 1, ed: 2, et: 3 }
    }
}

impl TumorScheme {
    /// Older BraTS releases used 4 for enhancing tumour.
    pub fn legacy() -> Self {
        TumorScheme { ncr: 1, ed: 2, et: 4 }
    }

    pub fn is_known(&self, l: u32) -> bool {
        l == 0 || l == self.ncr || l == self.ed || l == self.et
    }

    pub fn is_core(&self, l: u32) -> bool {
        l != 0 && (l == self.ncr || l == self.et)
    }

    pub fn is_tumor(&self, l: u32) -> bool {
        l != 0 && (l == self.ncr || l == self.ed || l == self.et)
    }
}

impl AnatomyScheme {
    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    pub fn regions_of_kind(&self, kind: RegionKind) -> impl Iterator<Item = &Region> {
        self.regions.iter().filter(move |r| r.kind == kind)
    }

    /// label -> indices of the regions that contain it
    pub fn membership(&self) -> HashMap<u32, Vec<usize>> {
        let mut m: HashMap<u32, Vec<usize>> = HashMap::new();
        for (ri, r) in self.regions.iter().enumerate() {
            for &l in &r.labels {
                m.entry(l).or_default().push(ri);
            }
        }
        m
    }

    /// Predicate over labels belonging to any region of one of `kinds`.
    pub fn label_set(&self, pred: impl Fn(&Region) -> bool) -> std::collections::HashSet<u32> {
        self.regions
            .iter()
            .filter(|r| pred(r))
            .flat_map(|r| r.labels.iter().copied())
            .collect()
    }

    pub fn known_labels(&self) -> std::collections::HashSet<u32> {
        self.label_set(|_| true)
    }

    /// SynthSeg labels with Desikan-Killiany cortical parcellation
    /// (FreeSurfer lookup-table numbering), grouped into lobes.
    pub fn synthseg_dk() -> Self {
        use Hemisphere::*;
        use RegionKind::*;
        let mut regions = Vec::new();
        let mut add = |name: String, labels: Vec<u32>, kind: RegionKind, side: Option<Hemisphere>| {
            regions.push(Region { name, labels, kind, side });
        };

        // (parcel offset, gyrus name, lobe)
        const PARCELS: [(u32, &str, &str); 34] = [
            (1, "banks of the superior temporal sulcus", "temporal"),
            (2, "caudal anterior cingulate", "cingulate"),
            (3, "caudal middle frontal gyrus", "frontal"),
            (5, "cuneus", "occipital"),
            (6, "entorhinal cortex", "temporal"),
            (7, "fusiform gyrus", "temporal"),
            (8, "inferior parietal lobule", "parietal"),
            (9, "inferior temporal gyrus", "temporal"),
            (10, "isthmus cingulate", "cingulate"),
            (11, "lateral occipital cortex", "occipital"),
            (12, "lateral orbitofrontal cortex", "frontal"),
            (13, "lingual gyrus", "occipital"),
            (14, "medial orbitofrontal cortex", "frontal"),
            (15, "middle temporal gyrus", "temporal"),
            (16, "parahippocampal gyrus", "temporal"),
            (17, "paracentral lobule", "frontal"),
            (18, "pars opercularis", "frontal"),
            (19, "pars orbitalis", "frontal"),
            (20, "pars triangularis", "frontal"),
            (21, "pericalcarine cortex", "occipital"),
            (22, "postcentral gyrus", "parietal"),
            (23, "posterior cingulate", "cingulate"),
            (24, "precentral gyrus", "frontal"),
            (25, "precuneus", "parietal"),
            (26, "rostral anterior cingulate", "cingulate"),
            (27, "rostral middle frontal gyrus", "frontal"),
            (28, "superior frontal gyrus", "frontal"),
            (29, "superior parietal lobule", "parietal"),
            (30, "superior temporal gyrus", "temporal"),
            (31, "supramarginal gyrus", "parietal"),
            (32, "frontal pole", "frontal"),
            (33, "temporal pole", "temporal"),
            (34, "transverse temporal gyrus", "temporal"),
            (35, "insula", "insular"),
        ];
        const LOBES: [&str; 6] = ["frontal", "parietal", "temporal", "occipital", "cingulate", "insular"];

        for (side, base, cortex, wm, lat, thal, bg, hip, amy, vdc, cereb) in [
            (Left, 1000u32, 3u32, 2u32, [4u32, 5], 10u32, [11u32, 12, 13, 26], 17u32, 18u32, 28u32, [7u32, 8]),
            (Right, 2000, 42, 41, [43, 44], 49, [50, 51, 52, 58], 53, 54, 60, [46, 47]),
        ] {
            let s = side.as_str();
            let mut cortex_labels = vec![cortex];
            cortex_labels.extend(PARCELS.iter().map(|p| base + p.0));
            add(format!("{s} cerebral cortex"), cortex_labels, Cortex, Some(side));
            add(format!("{s} cerebral white matter"), vec![wm], WhiteMatter, Some(side));
            for lobe in LOBES {
                let labels = PARCELS
                    .iter()
                    .filter(|p| p.2 == lobe)
                    .map(|p| base + p.0)
                    .collect();
                let name = if lobe == "insular" {
                    format!("{s} insula")
                } else if lobe == "cingulate" {
                    format!("{s} cingulate gyrus")
                } else {
                    format!("{s} {lobe} lobe")
                };
                add(name, labels, Lobe, Some(side));
            }
            for p in PARCELS.iter().filter(|p| p.2 != "insular") {
                add(format!("{s} {}", p.1), vec![base + p.0], Gyrus, Some(side));
            }
            add(format!("{s} lateral ventricle"), lat.to_vec(), LateralVentricle, Some(side));
            add(format!("{s} thalamus"), vec![thal], DeepGray, Some(side));
            add(format!("{s} basal ganglia"), bg.to_vec(), DeepGray, Some(side));
            add(format!("{s} hippocampus"), vec![hip], DeepGray, Some(side));
            add(format!("{s} amygdala"), vec![amy], DeepGray, Some(side));
            add(format!("{s} ventral diencephalon"), vec![vdc], DeepGray, Some(side));
            add(format!("{s} cerebellum"), cereb.to_vec(), Cerebellum, Some(side));
        }
        add("third ventricle".into(), vec![14], ThirdVentricle, None);
        add("fourth ventricle".into(), vec![15], FourthVentricle, None);
        add("brainstem".into(), vec![16], Brainstem, None);
        add("corpus callosum".into(), vec![251, 252, 253, 254, 255], CorpusCallosum, None);
        add("extraventricular CSF".into(), vec![24], Csf, None);
        AnatomyScheme {
            name: "synthseg-dk".into(),
            regions,
        }
    }
}
