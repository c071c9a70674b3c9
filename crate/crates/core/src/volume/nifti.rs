//! NIfTI-1 single-file reader and writer (`.nii`, `.nii.gz`).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::orient::Reorientation;
use super::{
    Affine, DisplacementField, Grid, IntensityVolume, LabelVolume, Mask, Result, Volume,
    VolumeError,
};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const INTENT_VECTOR: i16 = 1007;
const NIFTI_XFORM_ALIGNED_ANAT: i16 = 2;

/// On-disk voxel types accepted by this reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::U8,
            4 => Datatype::I16,
            8 => Datatype::I32,
            16 => Datatype::F32,
            64 => Datatype::F64,
            other => return Err(VolumeError::UnsupportedDatatype(other)),
        })
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::I32 | Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }
}

/// Raw voxel payload in its stored type.
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    I32(Vec<i32>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl VoxelData {
    pub fn datatype(&self) -> Datatype {
        match self {
            VoxelData::U8(_) => Datatype::U8,
            VoxelData::I16(_) => Datatype::I16,
            VoxelData::I32(_) => Datatype::I32,
            VoxelData::F32(_) => Datatype::F32,
            VoxelData::F64(_) => Datatype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::I16(v) => v.len(),
            VoxelData::I32(v) => v.len(),
            VoxelData::F32(v) => v.len(),
            VoxelData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            VoxelData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::I16(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::I32(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::F64(v) => v.clone(),
        }
    }

    fn decode(bytes: &[u8], dt: Datatype, n: usize, big_endian: bool) -> Self {
        macro_rules! read_vec {
            ($t:ty, $read:ident) => {{
                let mut out = vec![<$t>::default(); n];
                if big_endian {
                    BigEndian::$read(&bytes[..n * dt.bytes()], &mut out);
                } else {
                    LittleEndian::$read(&bytes[..n * dt.bytes()], &mut out);
                }
                out
            }};
        }
        match dt {
            Datatype::U8 => VoxelData::U8(bytes[..n].to_vec()),
            Datatype::I16 => VoxelData::I16(read_vec!(i16, read_i16_into)),
            Datatype::I32 => VoxelData::I32(read_vec!(i32, read_i32_into)),
            Datatype::F32 => VoxelData::F32(read_vec!(f32, read_f32_into)),
            Datatype::F64 => VoxelData::F64(read_vec!(f64, read_f64_into)),
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.resize(start + self.len() * self.datatype().bytes(), 0);
        let buf = &mut out[start..];
        match self {
            VoxelData::U8(v) => buf.copy_from_slice(v),
            VoxelData::I16(v) => LittleEndian::write_i16_into(v, buf),
            VoxelData::I32(v) => LittleEndian::write_i32_into(v, buf),
            VoxelData::F32(v) => LittleEndian::write_f32_into(v, buf),
            VoxelData::F64(v) => LittleEndian::write_f64_into(v, buf),
        }
    }

    fn reorient(self, r: &Reorientation, blocks: usize) -> Self {
        match self {
            VoxelData::U8(v) => VoxelData::U8(r.apply_blocks(&v, blocks)),
            VoxelData::I16(v) => VoxelData::I16(r.apply_blocks(&v, blocks)),
            VoxelData::I32(v) => VoxelData::I32(r.apply_blocks(&v, blocks)),
            VoxelData::F32(v) => VoxelData::F32(r.apply_blocks(&v, blocks)),
            VoxelData::F64(v) => VoxelData::F64(r.apply_blocks(&v, blocks)),
        }
    }
}

/// A decoded NIfTI-1 image in RAS orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub grid: Grid,
    pub data: VoxelData,
    /// Number of stacked volumes (1 for images, 3 for vector fields).
    pub components: usize,
    pub intent_code: i16,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub descrip: String,
}

impl NiftiImage {
    pub fn datatype(&self) -> Datatype {
        self.data.datatype()
    }

    pub fn from_labels(vol: &LabelVolume, datatype: Datatype) -> Result<Self> {
        let max = vol.data().iter().copied().max().unwrap_or(0) as u64;
        let limit: u64 = match datatype {
            Datatype::U8 => u8::MAX as u64,
            Datatype::I16 => i16::MAX as u64,
            Datatype::I32 => i32::MAX as u64,
            Datatype::F32 => 1 << 24,
            Datatype::F64 => 1 << 53,
        };
        if max > limit {
            return Err(VolumeError::BadLabels(format!(
                "label {max} does not fit datatype {datatype:?}"
            )));
        }
        let d = vol.data();
        let data = match datatype {
            Datatype::U8 => VoxelData::U8(d.iter().map(|&l| l as u8).collect()),
            Datatype::I16 => VoxelData::I16(d.iter().map(|&l| l as i16).collect()),
            Datatype::I32 => VoxelData::I32(d.iter().map(|&l| l as i32).collect()),
            Datatype::F32 => VoxelData::F32(d.iter().map(|&l| l as f32).collect()),
            Datatype::F64 => VoxelData::F64(d.iter().map(|&l| l as f64).collect()),
        };
        Ok(Self::plain(*vol.grid(), data))
    }

    pub fn from_mask(mask: &Mask) -> Self {
        Self::plain(
            *mask.grid(),
            VoxelData::U8(mask.data().iter().map(|&b| b as u8).collect()),
        )
    }

    pub fn from_intensity(vol: &IntensityVolume) -> Self {
        Self::plain(*vol.grid(), VoxelData::F32(vol.data().to_vec()))
    }

    fn plain(grid: Grid, data: VoxelData) -> Self {
        NiftiImage {
            grid,
            data,
            components: 1,
            intent_code: 0,
            scl_slope: 1.0,
            scl_inter: 0.0,
            descrip: String::new(),
        }
    }

    fn scaling(&self) -> Option<(f64, f64)> {
        let slope = self.scl_slope as f64;
        let inter = self.scl_inter as f64;
        (slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0))
            .then_some((slope, inter))
    }

    /// Scalar intensities with `scl_slope`/`scl_inter` applied.
    pub fn to_intensity(&self) -> IntensityVolume {
        let mut vals = self.data.to_f64();
        vals.truncate(self.grid.len());
        if let Some((s, i)) = self.scaling() {
            vals.iter_mut().for_each(|v| *v = *v * s + i);
        }
        Volume::from_vec(self.grid, vals.into_iter().map(|v| v as f32).collect())
            .expect("grid checked at decode")
    }

    /// Integer labels. Negative or fractional values are an error.
    pub fn to_labels(&self) -> Result<LabelVolume> {
        let n = self.grid.len();
        let data: Vec<u32> = match &self.data {
            VoxelData::U8(v) => v[..n].iter().map(|&x| x as u32).collect(),
            VoxelData::I16(v) => int_labels(v[..n].iter().map(|&x| x as i64))?,
            VoxelData::I32(v) => int_labels(v[..n].iter().map(|&x| x as i64))?,
            VoxelData::F32(v) => float_labels(v[..n].iter().map(|&x| x as f64))?,
            VoxelData::F64(v) => float_labels(v[..n].iter().copied())?,
        };
        Volume::from_vec(self.grid, data)
    }

    /// Non-zero voxels.
    pub fn to_mask(&self) -> Mask {
        let vals = self.data.to_f64();
        Volume::from_vec(self.grid, vals[..self.grid.len()].iter().map(|&v| v != 0.0).collect())
            .expect("grid checked at decode")
    }

    /// Decodes a complete `.nii` byte stream (gzip-compressed or not).
    pub fn from_bytes(raw: &[u8]) -> Result<Self> {
        let owned;
        let bytes = if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
            let mut buf = Vec::new();
            MultiGzDecoder::new(raw).read_to_end(&mut buf)?;
            owned = buf;
            &owned[..]
        } else {
            raw
        };
        let header = RawHeader::parse(bytes)?;
        let mut dims = [1usize; 7];
        for (d, slot) in dims.iter_mut().enumerate().take(header.ndim) {
            *slot = header.dim[d + 1] as usize;
        }
        let (grid_dims, components) = if header.ndim <= 4 {
            if dims[3] != 1 {
                return Err(VolumeError::BadHeader(format!(
                    "4-D series with {} volumes not supported",
                    dims[3]
                )));
            }
            ([dims[0], dims[1], dims[2]], 1)
        } else {
            if dims[3] != 1 || dims[5] != 1 || dims[6] != 1 {
                return Err(VolumeError::BadHeader(
                    "only 5-D images with dim[4]=1 are supported".into(),
                ));
            }
            ([dims[0], dims[1], dims[2]], dims[4])
        };
        let n = grid_dims.iter().product::<usize>() * components;
        let dt = Datatype::from_code(header.datatype)?;
        let offset = header.vox_offset;
        let needed = n * dt.bytes();
        let avail = bytes.len().saturating_sub(offset);
        if avail < needed {
            return Err(VolumeError::PayloadMismatch {
                expected: needed,
                actual: avail,
            });
        }
        let data = VoxelData::decode(&bytes[offset..], dt, n, header.big_endian);
        let grid = Grid::new(grid_dims, header.affine()?);
        let r = Reorientation::for_grid(&grid);
        let data = data.reorient(&r, components);
        Ok(NiftiImage {
            grid: r.new_grid(),
            data,
            components,
            intent_code: header.intent_code,
            scl_slope: header.scl_slope,
            scl_inter: header.scl_inter,
            descrip: header.descrip,
        })
    }

    /// Little-endian single-file encoding with an sform affine.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = vec![0u8; DATA_OFFSET];
        LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
        let ndim: i16 = if self.components > 1 { 5 } else { 3 };
        let mut dim = [1i16; 8];
        dim[0] = ndim;
        for a in 0..3 {
            dim[a + 1] = self.grid.dims[a] as i16;
        }
        if self.components > 1 {
            dim[5] = self.components as i16;
        }
        LittleEndian::write_i16_into(&dim, &mut h[40..56]);
        LittleEndian::write_i16(&mut h[68..70], self.intent_code);
        let dt = self.datatype();
        LittleEndian::write_i16(&mut h[70..72], dt.code());
        LittleEndian::write_i16(&mut h[72..74], (dt.bytes() * 8) as i16);
        let sp = self.grid.spacing();
        let pixdim = [1.0f32, sp[0] as f32, sp[1] as f32, sp[2] as f32, 1.0, 1.0, 1.0, 1.0];
        LittleEndian::write_f32_into(&pixdim, &mut h[76..108]);
        LittleEndian::write_f32(&mut h[108..112], DATA_OFFSET as f32);
        LittleEndian::write_f32(&mut h[112..116], self.scl_slope);
        LittleEndian::write_f32(&mut h[116..120], self.scl_inter);
        h[123] = 2; // mm
        let desc = self.descrip.as_bytes();
        let dl = desc.len().min(79);
        h[148..148 + dl].copy_from_slice(&desc[..dl]);
        LittleEndian::write_i16(&mut h[252..254], 0);
        LittleEndian::write_i16(&mut h[254..256], NIFTI_XFORM_ALIGNED_ANAT);
        let m = self.grid.affine.0;
        for r in 0..3 {
            let row = [m[(r, 0)] as f32, m[(r, 1)] as f32, m[(r, 2)] as f32, m[(r, 3)] as f32];
            LittleEndian::write_f32_into(&row, &mut h[280 + r * 16..296 + r * 16]);
        }
        if self.components > 1 && self.intent_code == INTENT_VECTOR {
            h[328..334].copy_from_slice(b"vector");
        }
        h[344..348].copy_from_slice(b"n+1\0");
        // h[348..352] is the empty extension flag
        self.data.encode(&mut h);
        h
    }
}

fn int_labels(vals: impl Iterator<Item = i64>) -> Result<Vec<u32>> {
    vals.map(|v| {
        u32::try_from(v).map_err(|_| VolumeError::BadLabels(format!("negative label {v}")))
    })
    .collect()
}

fn float_labels(vals: impl Iterator<Item = f64>) -> Result<Vec<u32>> {
    vals.map(|v| {
        if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
            Ok(v as u32)
        } else {
            Err(VolumeError::BadLabels(format!("non-integer or negative label {v}")))
        }
    })
    .collect()
}

struct RawHeader {
    big_endian: bool,
    ndim: usize,
    dim: [i16; 8],
    intent_code: i16,
    datatype: i16,
    pixdim: [f32; 8],
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    descrip: String,
    qform_code: i16,
    sform_code: i16,
    quatern: [f32; 6],
    srow: [[f32; 4]; 3],
}

impl RawHeader {
    fn parse(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_SIZE {
            return Err(VolumeError::BadHeader(format!(
                "file is {} bytes, shorter than the 348-byte header",
                b.len()
            )));
        }
        let magic = [b[344], b[345], b[346], b[347]];
        if &magic[..3] != b"n+1" || magic[3] != 0 {
            return Err(VolumeError::BadMagic(magic));
        }
        let le0 = LittleEndian::read_i16(&b[40..42]);
        let big_endian = if (1..=7).contains(&le0) {
            false
        } else if (1..=7).contains(&BigEndian::read_i16(&b[40..42])) {
            true
        } else {
            return Err(VolumeError::BadHeader(format!("dim[0] = {le0} out of range")));
        };
        if big_endian {
            Self::parse_with::<BigEndian>(b, true)
        } else {
            Self::parse_with::<LittleEndian>(b, false)
        }
    }

    fn parse_with<E: ByteOrder>(b: &[u8], big_endian: bool) -> Result<Self> {
        let sizeof_hdr = E::read_i32(&b[0..4]);
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(VolumeError::BadHeader(format!("sizeof_hdr = {sizeof_hdr}")));
        }
        let mut dim = [0i16; 8];
        E::read_i16_into(&b[40..56], &mut dim);
        let ndim = dim[0] as usize;
        for (d, v) in dim.iter().enumerate().take(ndim + 1).skip(1) {
            if *v < 1 {
                return Err(VolumeError::BadHeader(format!("dim[{d}] = {v}")));
            }
        }
        let mut pixdim = [0f32; 8];
        E::read_f32_into(&b[76..108], &mut pixdim);
        let vox_offset = E::read_f32(&b[108..112]);
        let vox_offset = if vox_offset < HEADER_SIZE as f32 {
            DATA_OFFSET
        } else {
            vox_offset as usize
        };
        let descrip = String::from_utf8_lossy(&b[148..228])
            .trim_end_matches('\0')
            .to_string();
        let mut quatern = [0f32; 6];
        E::read_f32_into(&b[256..280], &mut quatern);
        let mut srow = [[0f32; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            E::read_f32_into(&b[280 + r * 16..296 + r * 16], row);
        }
        Ok(RawHeader {
            big_endian,
            ndim,
            dim,
            intent_code: E::read_i16(&b[68..70]),
            datatype: E::read_i16(&b[70..72]),
            pixdim,
            vox_offset,
            scl_slope: E::read_f32(&b[112..116]),
            scl_inter: E::read_f32(&b[116..120]),
            descrip,
            qform_code: E::read_i16(&b[252..254]),
            sform_code: E::read_i16(&b[254..256]),
            quatern,
            srow,
        })
    }

    /// sform when `sform_code > 0`, else qform, else plain pixdim scaling.
    fn affine(&self) -> Result<Affine> {
        let a = if self.sform_code > 0 {
            let mut rows = [[0.0; 4]; 3];
            for r in 0..3 {
                for c in 0..4 {
                    rows[r][c] = self.srow[r][c] as f64;
                }
            }
            Affine::from_rows(rows)
        } else if self.qform_code > 0 {
            self.qform_affine()
        } else {
            let p = &self.pixdim;
            Affine::from_spacing_origin([p[1] as f64, p[2] as f64, p[3] as f64], [0.0; 3])
        };
        if !a.is_invertible() {
            return Err(VolumeError::SingularAffine);
        }
        Ok(a)
    }

    fn qform_affine(&self) -> Affine {
        let (mut b, mut c, mut d) = (
            self.quatern[0] as f64,
            self.quatern[1] as f64,
            self.quatern[2] as f64,
        );
        let s = b * b + c * c + d * d;
        let a = if 1.0 - s < 1e-7 {
            let n = s.sqrt();
            b /= n;
            c /= n;
            d /= n;
            0.0
        } else {
            (1.0 - s).sqrt()
        };
        let r = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ];
        let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let sp = [
            self.pixdim[1] as f64,
            self.pixdim[2] as f64,
            self.pixdim[3] as f64 * qfac,
        ];
        let off = [
            self.quatern[3] as f64,
            self.quatern[4] as f64,
            self.quatern[5] as f64,
        ];
        let mut rows = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rows[i][j] = r[i][j] * sp[j];
            }
            rows[i][3] = off[i];
        }
        Affine::from_rows(rows)
    }
}

/// Reads a `.nii` or `.nii.gz` file. Compression is detected from the
/// gzip magic bytes, not the extension. The result is reoriented to RAS.
pub fn load_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let raw = fs::read(path)?;
    NiftiImage::from_bytes(&raw)
}

/// Writes an image; a `.gz` extension selects gzip compression.
pub fn save_nifti(path: impl AsRef<Path>, img: &NiftiImage) -> Result<()> {
    let path = path.as_ref();
    let bytes = img.to_bytes();
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes)?;
        fs::write(path, enc.finish()?)?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

/// Reads a 5-D vector image (dim[5] = 3) as a displacement field in mm.
pub fn load_displacement_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let img = load_nifti(path)?;
    if img.components != 3 {
        return Err(VolumeError::BadHeader(format!(
            "displacement field needs 3 vector components, found {}",
            img.components
        )));
    }
    let n = img.grid.len();
    let mut vals = img.data.to_f64();
    if let Some((s, i)) = img.scaling() {
        vals.iter_mut().for_each(|v| *v = *v * s + i);
    }
    let vectors = (0..n)
        .map(|v| [vals[v], vals[n + v], vals[2 * n + v]])
        .collect();
    DisplacementField::new(img.grid, vectors)
}

pub fn save_displacement_field(path: impl AsRef<Path>, field: &DisplacementField) -> Result<()> {
    let n = field.grid().len();
    let mut vals = vec![0f32; 3 * n];
    for (v, vec) in field.vectors().iter().enumerate() {
        for c in 0..3 {
            vals[c * n + v] = vec[c] as f32;
        }
    }
    let img = NiftiImage {
        grid: *field.grid(),
        data: VoxelData::F32(vals),
        components: 3,
        intent_code: INTENT_VECTOR,
        scl_slope: 1.0,
        scl_inter: 0.0,
        descrip: "displacement mm".into(),
    };
    save_nifti(path, &img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_header_4cube() -> Vec<u8> {
        let mut h = vec![0u8; DATA_OFFSET];
        LittleEndian::write_i32(&mut h[0..4], 348);
        LittleEndian::write_i16_into(&[3, 4, 4, 4, 1, 1, 1, 1], &mut h[40..56]);
        LittleEndian::write_i16(&mut h[70..72], 16);
        LittleEndian::write_i16(&mut h[72..74], 32);
        LittleEndian::write_f32_into(&[1.0; 8], &mut h[76..108]);
        LittleEndian::write_f32(&mut h[108..112], 352.0);
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend(std::iter::repeat(0u8).take(64 * 4));
        h
    }

    #[test]
    fn zero_volume_decodes() {
        let img = NiftiImage::from_bytes(&zero_header_4cube()).unwrap();
        let v = img.to_intensity();
        assert_eq!(v.dims(), [4, 4, 4]);
        assert_eq!(v.data().len(), 64);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut b = zero_header_4cube();
        b[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(NiftiImage::from_bytes(&b), Err(VolumeError::BadMagic(_))));
    }

    #[test]
    fn unsupported_datatype_is_rejected() {
        let mut b = zero_header_4cube();
        LittleEndian::write_i16(&mut b[70..72], 512); // uint16
        assert!(matches!(
            NiftiImage::from_bytes(&b),
            Err(VolumeError::UnsupportedDatatype(512))
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut b = zero_header_4cube();
        b.truncate(b.len() - 10);
        assert!(matches!(
            NiftiImage::from_bytes(&b),
            Err(VolumeError::PayloadMismatch { .. })
        ));
    }

    #[test]
    fn big_endian_header_is_accepted() {
        let mut h = vec![0u8; DATA_OFFSET];
        BigEndian::write_i32(&mut h[0..4], 348);
        BigEndian::write_i16_into(&[3, 2, 2, 1, 1, 1, 1, 1], &mut h[40..56]);
        BigEndian::write_i16(&mut h[70..72], 4);
        BigEndian::write_f32_into(&[1.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0], &mut h[76..108]);
        BigEndian::write_f32(&mut h[108..112], 352.0);
        h[344..348].copy_from_slice(b"n+1\0");
        for v in [1i16, 2, 3, 300] {
            h.extend_from_slice(&v.to_be_bytes());
        }
        let img = NiftiImage::from_bytes(&h).unwrap();
        let labels = img.to_labels().unwrap();
        assert_eq!(labels.data(), &[1, 2, 3, 300]);
        assert_eq!(labels.spacing(), [2.0, 2.0, 2.0]);
    }

    #[test]
    fn qform_is_used_without_sform() {
        let mut b = zero_header_4cube();
        LittleEndian::write_i16(&mut b[252..254], 1);
        // 180 degrees about z: (b,c,d) = (0,0,1)
        LittleEndian::write_f32_into(&[0.0, 0.0, 1.0, 10.0, 20.0, 30.0], &mut b[256..280]);
        let img = NiftiImage::from_bytes(&b).unwrap();
        // world of the RAS voxel (0,0,0) is the most right-anterior-inferior corner
        let w = img.grid.affine.voxel_to_world([0.0, 0.0, 0.0]);
        assert!((w[0] - 7.0).abs() < 1e-6 && (w[1] - 17.0).abs() < 1e-6 && (w[2] - 30.0).abs() < 1e-6);
    }

    #[test]
    fn negative_labels_error() {
        let g = Grid::with_spacing([2, 1, 1], [1.0; 3]);
        let img = NiftiImage::plain(g, VoxelData::I16(vec![1, -1]));
        assert!(img.to_labels().is_err());
    }

    #[test]
    fn gzip_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(
            [3, 2, 2],
            Affine::from_rows([[1.5, 0.0, 0.0, -4.0], [0.0, 2.0, 0.0, 3.0], [0.0, 0.0, 2.5, 1.0]]),
        );
        let labels = Volume::from_vec(g, (0..12u32).collect()).unwrap();
        let img = NiftiImage::from_labels(&labels, Datatype::I16).unwrap();
        let p = dir.path().join("x.nii.gz");
        save_nifti(&p, &img).unwrap();
        let raw = fs::read(&p).unwrap();
        assert_eq!(&raw[..2], &[0x1f, 0x8b]);
        let back = load_nifti(&p).unwrap();
        assert_eq!(back.datatype(), Datatype::I16);
        assert_eq!(back.to_labels().unwrap(), labels);
        assert!(back.grid.affine.approx_eq(&g.affine, 1e-6));
    }

    #[test]
    fn displacement_field_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::with_spacing([2, 2, 1], [1.0; 3]);
        let vecs = vec![[1.0, -2.0, 0.5], [0.0, 0.0, 0.0], [3.0, 2.0, 1.0], [-1.0, -1.0, -1.0]];
        let f = DisplacementField::new(g, vecs.clone()).unwrap();
        let p = dir.path().join("f.nii");
        save_displacement_field(&p, &f).unwrap();
        let back = load_displacement_field(&p).unwrap();
        assert_eq!(back.vectors(), &vecs[..]);
    }
}
