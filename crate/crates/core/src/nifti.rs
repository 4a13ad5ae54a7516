//! NIfTI-1 single-file (`.nii`, `.nii.gz`) codec.
//!
//! Only the parts of the format needed for 3D scalar volumes are decoded:
//! dimensions, voxel spacing, datatype, intensity scaling and the
//! qform/sform orientation. Both byte orders are accepted on read; files
//! are always written little-endian.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const DEFAULT_VOX_OFFSET: usize = 352;
pub const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Voxel storage types this codec understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Datatype {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
    Uint16,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::Uint8,
            4 => Datatype::Int16,
            8 => Datatype::Int32,
            16 => Datatype::Float32,
            64 => Datatype::Float64,
            512 => Datatype::Uint16,
            other => return Err(Error::UnsupportedDatatype(other)),
        })
    }

    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Int32 => 8,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
            Datatype::Uint16 => 512,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 | Datatype::Uint16 => 2,
            Datatype::Int32 | Datatype::Float32 => 4,
            Datatype::Float64 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, Datatype::Float32 | Datatype::Float64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// The subset of NIfTI-1 header fields carried through this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub cal_max: f32,
    pub cal_min: f32,
    pub descrip: [u8; 80],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
    pub endian: Endian,
}

impl Default for NiftiHeader {
    fn default() -> Self {
        NiftiHeader {
            dim: [3, 1, 1, 1, 1, 1, 1, 1],
            datatype: Datatype::Float32.code(),
            bitpix: 32,
            pixdim: [1.0; 8],
            vox_offset: DEFAULT_VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            // mm + seconds
            xyzt_units: 2 | 8,
            cal_max: 0.0,
            cal_min: 0.0,
            descrip: [0; 80],
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
            magic: MAGIC_SINGLE,
            endian: Endian::Little,
        }
    }
}

struct Fields<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Fields<'_> {
    fn arr<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[off..off + N]);
        out
    }

    fn i16(&self, off: usize) -> i16 {
        match self.endian {
            Endian::Little => i16::from_le_bytes(self.arr(off)),
            Endian::Big => i16::from_be_bytes(self.arr(off)),
        }
    }

    fn i32(&self, off: usize) -> i32 {
        match self.endian {
            Endian::Little => i32::from_le_bytes(self.arr(off)),
            Endian::Big => i32::from_be_bytes(self.arr(off)),
        }
    }

    fn f32(&self, off: usize) -> f32 {
        match self.endian {
            Endian::Little => f32::from_le_bytes(self.arr(off)),
            Endian::Big => f32::from_be_bytes(self.arr(off)),
        }
    }
}

impl NiftiHeader {
    /// Parses the first 348 bytes of a single-file NIfTI-1 image.
    pub fn parse(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_SIZE {
            return Err(format!(
                "truncated header: {} bytes, expected {HEADER_SIZE}",
                bytes.len()
            ));
        }
        let sizeof_hdr: [u8; 4] = bytes[0..4].try_into().unwrap();
        let endian = if i32::from_le_bytes(sizeof_hdr) == HEADER_SIZE as i32 {
            Endian::Little
        } else if i32::from_be_bytes(sizeof_hdr) == HEADER_SIZE as i32 {
            Endian::Big
        } else {
            return Err("sizeof_hdr is not 348; not a NIfTI-1 file".into());
        };
        let f = Fields { bytes, endian };
        debug_assert_eq!(f.i32(0), HEADER_SIZE as i32);

        let magic: [u8; 4] = f.arr(344);
        if magic != MAGIC_SINGLE {
            if &magic[..3] == b"ni1" {
                return Err("detached header/image pairs (ni1) are not supported".into());
            }
            return Err(format!("bad magic {magic:?}, expected \"n+1\\0\""));
        }

        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = f.i16(40 + 2 * i);
        }
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = f.f32(76 + 4 * i);
        }
        let mut srow = [[0f32; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f.f32(280 + 16 * r + 4 * c);
            }
        }

        Ok(NiftiHeader {
            dim,
            datatype: f.i16(70),
            bitpix: f.i16(72),
            pixdim,
            vox_offset: f.f32(108),
            scl_slope: f.f32(112),
            scl_inter: f.f32(116),
            xyzt_units: bytes[123],
            cal_max: f.f32(124),
            cal_min: f.f32(128),
            descrip: f.arr(148),
            qform_code: f.i16(252),
            sform_code: f.i16(254),
            quatern: [f.f32(256), f.f32(260), f.f32(264)],
            qoffset: [f.f32(268), f.f32(272), f.f32(276)],
            srow,
            magic,
            endian,
        })
    }

    /// Serializes to 348 little-endian bytes.
    pub fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        let mut out = [0u8; HEADER_SIZE];
        let mut put = |off: usize, src: &[u8]| out[off..off + src.len()].copy_from_slice(src);

        put(0, &(HEADER_SIZE as i32).to_le_bytes());
        // regular = 'r'
        put(38, b"r");
        for (i, d) in self.dim.iter().enumerate() {
            put(40 + 2 * i, &d.to_le_bytes());
        }
        put(70, &self.datatype.to_le_bytes());
        put(72, &self.bitpix.to_le_bytes());
        for (i, p) in self.pixdim.iter().enumerate() {
            put(76 + 4 * i, &p.to_le_bytes());
        }
        put(108, &self.vox_offset.to_le_bytes());
        put(112, &self.scl_slope.to_le_bytes());
        put(116, &self.scl_inter.to_le_bytes());
        put(123, &[self.xyzt_units]);
        put(124, &self.cal_max.to_le_bytes());
        put(128, &self.cal_min.to_le_bytes());
        put(148, &self.descrip);
        put(252, &self.qform_code.to_le_bytes());
        put(254, &self.sform_code.to_le_bytes());
        for (i, q) in self.quatern.iter().enumerate() {
            put(256 + 4 * i, &q.to_le_bytes());
        }
        for (i, q) in self.qoffset.iter().enumerate() {
            put(268 + 4 * i, &q.to_le_bytes());
        }
        for (r, row) in self.srow.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                put(280 + 16 * r + 4 * c, &v.to_le_bytes());
            }
        }
        put(344, &self.magic);
        out
    }

    /// Spatial dimensions, squeezing a trailing singleton 4th dimension.
    pub fn spatial_dims(&self) -> std::result::Result<[usize; 3], String> {
        let ndim = self.dim[0];
        match ndim {
            3 => {}
            4 if self.dim[4] == 1 => {}
            4 => {
                return Err(format!(
                    "4D volume with {} frames; only a singleton 4th dimension is accepted",
                    self.dim[4]
                ))
            }
            n => return Err(format!("expected 3 dimensions, header declares {n}")),
        }
        let mut dims = [0usize; 3];
        for (axis, d) in dims.iter_mut().enumerate() {
            let n = self.dim[axis + 1];
            if n <= 0 {
                return Err(format!("non-positive size {n} along axis {axis}"));
            }
            *d = n as usize;
        }
        Ok(dims)
    }

    pub fn spacing(&self) -> [f64; 3] {
        [
            self.pixdim[1].abs() as f64,
            self.pixdim[2].abs() as f64,
            self.pixdim[3].abs() as f64,
        ]
    }

    /// Voxel-index to world (mm) transform: sform if set, else qform, else
    /// a diagonal spacing matrix.
    pub fn affine(&self) -> [[f64; 4]; 4] {
        if self.sform_code > 0 {
            let mut a = [[0.0; 4]; 4];
            for (r, row) in self.srow.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    a[r][c] = *v as f64;
                }
            }
            a[3][3] = 1.0;
            a
        } else if self.qform_code > 0 {
            self.qform_affine()
        } else {
            let s = self.spacing();
            [
                [s[0], 0.0, 0.0, 0.0],
                [0.0, s[1], 0.0, 0.0],
                [0.0, 0.0, s[2], 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ]
        }
    }

    fn qform_affine(&self) -> [[f64; 4]; 4] {
        let [b, c, d] = self.quatern.map(|q| q as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let [si, sj, sk] = self.spacing();
        let sk = sk * qfac;
        let r = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - c * c - b * b,
            ],
        ];
        let mut out = [[0.0; 4]; 4];
        for row in 0..3 {
            out[row][0] = r[row][0] * si;
            out[row][1] = r[row][1] * sj;
            out[row][2] = r[row][2] * sk;
            out[row][3] = self.qoffset[row] as f64;
        }
        out[3][3] = 1.0;
        out
    }

    /// Whether `scl_slope`/`scl_inter` must be applied to raw values.
    pub fn has_scaling(&self) -> bool {
        self.scl_slope != 0.0 && self.scl_slope.is_finite()
    }
}

/// Decoded image: header plus voxel values after intensity scaling, in
/// file order (i fastest).
#[derive(Debug, Clone)]
pub struct NiftiImage {
    pub header: NiftiHeader,
    pub datatype: Datatype,
    pub dims: [usize; 3],
    pub values: Vec<f64>,
}

/// Reads a `.nii` or gzip-compressed `.nii.gz` file. Compression is
/// detected from the leading bytes, not the extension.
pub fn read_image(path: &Path) -> Result<NiftiImage> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let bytes = if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::with_capacity(raw.len() * 4);
        MultiGzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::nifti(path, format!("gzip stream: {e}")))?;
        out
    } else {
        raw
    };
    decode_image(&bytes).map_err(|e| match e {
        DecodeError::Datatype(code) => Error::UnsupportedDatatype(code),
        DecodeError::Format(reason) => Error::nifti(path, reason),
    })
}

#[derive(Debug)]
enum DecodeError {
    Datatype(i16),
    Format(String),
}

impl From<String> for DecodeError {
    fn from(s: String) -> Self {
        DecodeError::Format(s)
    }
}

fn decode_image(bytes: &[u8]) -> std::result::Result<NiftiImage, DecodeError> {
    let header = NiftiHeader::parse(bytes)?;
    let dims = header.spatial_dims()?;
    let datatype =
        Datatype::from_code(header.datatype).map_err(|_| DecodeError::Datatype(header.datatype))?;

    let offset = header.vox_offset;
    if !offset.is_finite() || offset < HEADER_SIZE as f32 {
        return Err(format!("invalid vox_offset {offset}").into());
    }
    let offset = offset as usize;
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|x| x.checked_mul(dims[2]))
        .ok_or_else(|| "voxel count overflows".to_string())?;
    let need = n * datatype.size();
    let available = bytes.len().saturating_sub(offset);
    if available < need {
        return Err(format!(
            "truncated file: voxel data needs {need} bytes at offset {offset}, found {available}"
        )
        .into());
    }
    let payload = &bytes[offset..offset + need];
    let mut values = decode_values(payload, datatype, header.endian);

    if header.has_scaling() {
        let slope = header.scl_slope as f64;
        let inter = header.scl_inter as f64;
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    Ok(NiftiImage {
        header,
        datatype,
        dims,
        values,
    })
}

macro_rules! decode_as {
    ($payload:expr, $ty:ty, $endian:expr) => {{
        const W: usize = std::mem::size_of::<$ty>();
        $payload
            .chunks_exact(W)
            .map(|c| {
                let b: [u8; W] = c.try_into().unwrap();
                let v = match $endian {
                    Endian::Little => <$ty>::from_le_bytes(b),
                    Endian::Big => <$ty>::from_be_bytes(b),
                };
                v as f64
            })
            .collect::<Vec<f64>>()
    }};
}

fn decode_values(payload: &[u8], datatype: Datatype, endian: Endian) -> Vec<f64> {
    match datatype {
        Datatype::Uint8 => payload.iter().map(|&b| b as f64).collect(),
        Datatype::Int16 => decode_as!(payload, i16, endian),
        Datatype::Uint16 => decode_as!(payload, u16, endian),
        Datatype::Int32 => decode_as!(payload, i32, endian),
        Datatype::Float32 => decode_as!(payload, f32, endian),
        Datatype::Float64 => decode_as!(payload, f64, endian),
    }
}

/// Writes a header and already-encoded little-endian voxel bytes. The
/// output is gzip-compressed when the path ends in `.gz`.
pub fn write_image(path: &Path, header: &NiftiHeader, payload: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    let offset = header.vox_offset as usize;
    let pad = vec![0u8; offset.saturating_sub(HEADER_SIZE)];
    let write_all = |w: &mut dyn Write| -> std::io::Result<()> {
        w.write_all(&header.to_bytes())?;
        w.write_all(&pad)?;
        w.write_all(payload)
    };
    let res = if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::fast());
        write_all(&mut enc).and_then(|_| enc.finish()).and_then(|mut w| w.flush())
    } else {
        let mut w = BufWriter::new(file);
        write_all(&mut w).and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

/// Fills dim/pixdim/sform fields for a 3D volume.
pub fn header_for(
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: &[[f64; 4]; 4],
    datatype: Datatype,
) -> NiftiHeader {
    let mut h = NiftiHeader {
        datatype: datatype.code(),
        bitpix: (datatype.size() * 8) as i16,
        ..NiftiHeader::default()
    };
    h.dim[0] = 3;
    for axis in 0..3 {
        h.dim[axis + 1] = dims[axis] as i16;
        h.pixdim[axis + 1] = spacing[axis] as f32;
    }
    h.sform_code = 1;
    for (r, row) in h.srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = affine[r][c] as f32;
        }
    }
    h
}
