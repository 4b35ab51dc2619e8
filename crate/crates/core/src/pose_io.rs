//! `.aigk` pose files and the video-vs-pose size accounting.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "AIGK"
//! 4       1     version (1)
//! 5       1     dims (2 or 3)
//! 6       2     n_keypoints (u16)
//! 8       4     n_frames (u32)
//! 12      4     fps (f32)
//! 16      2     topology name length in bytes (u16)
//! 18      n     topology name, UTF-8
//! 18+n    ...   payload: f32 per value, frame-major, joint-minor,
//!               coordinates then confidence
//! ```
//!
//! Values are stored as `f32`. A sequence whose values are all exactly
//! representable in `f32` survives `decode(encode(s))` unchanged; a file
//! survives `encode(decode(bytes))` byte for byte.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{validate, Dims, Keypoint, PoseSequence, SkeletonTopology, Violation};

pub const MAGIC: [u8; 4] = *b"AIGK";
pub const VERSION: u8 = 1;
/// Header bytes before the topology name.
pub const FIXED_HEADER_LEN: usize = 18;

#[derive(Debug, Error)]
pub enum PoseIoError {
    #[error("bad magic {0:?}, expected \"AIGK\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("dims must be 2 or 3, got {0}")]
    BadDims(u8),
    #[error("truncated: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{extra} trailing bytes after {expected}-byte file")]
    TrailingBytes { expected: usize, extra: usize },
    #[error("topology name is not UTF-8")]
    BadName,
    #[error("header field overflow: {0}")]
    Overflow(&'static str),
    #[error("invalid sequence: {} violation(s), first {:?}", .0.len(), .0.first())]
    Invalid(Vec<Violation>),
    #[error("file has {file} keypoints, topology {name:?} has {topology}")]
    TopologyMismatch {
        name: String,
        file: usize,
        topology: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseFileHeader {
    pub version: u8,
    pub dims: Dims,
    pub n_keypoints: u16,
    pub n_frames: u32,
    pub fps: f32,
    pub topology_name: String,
}

impl PoseFileHeader {
    pub fn len(&self) -> usize {
        FIXED_HEADER_LEN + self.topology_name.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn payload_len(&self) -> usize {
        self.n_frames as usize * self.n_keypoints as usize * (self.dims.count() + 1) * 4
    }

    /// Parses the header, checking only that its own bytes are present.
    pub fn parse(bytes: &[u8]) -> Result<Self, PoseIoError> {
        if bytes.len() < FIXED_HEADER_LEN {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(PoseIoError::BadMagic(bytes[..4].try_into().unwrap()));
            }
            return Err(PoseIoError::Truncated {
                expected: FIXED_HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(PoseIoError::BadMagic(magic));
        }
        let version = bytes[4];
        if version != VERSION {
            return Err(PoseIoError::UnsupportedVersion(version));
        }
        let dims = Dims::try_from(bytes[5]).map_err(|_| PoseIoError::BadDims(bytes[5]))?;
        let n_keypoints = u16::from_le_bytes([bytes[6], bytes[7]]);
        let n_frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let fps = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let name_len = u16::from_le_bytes([bytes[16], bytes[17]]) as usize;
        let name_end = FIXED_HEADER_LEN + name_len;
        if bytes.len() < name_end {
            return Err(PoseIoError::Truncated {
                expected: name_end,
                actual: bytes.len(),
            });
        }
        let topology_name = std::str::from_utf8(&bytes[FIXED_HEADER_LEN..name_end])
            .map_err(|_| PoseIoError::BadName)?
            .to_owned();
        Ok(Self {
            version,
            dims,
            n_keypoints,
            n_frames,
            fps,
            topology_name,
        })
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.push(self.version);
        out.push(self.dims.count() as u8);
        out.extend_from_slice(&self.n_keypoints.to_le_bytes());
        out.extend_from_slice(&self.n_frames.to_le_bytes());
        out.extend_from_slice(&self.fps.to_le_bytes());
        out.extend_from_slice(&(self.topology_name.len() as u16).to_le_bytes());
        out.extend_from_slice(self.topology_name.as_bytes());
    }
}

fn header_for(seq: &PoseSequence) -> Result<PoseFileHeader, PoseIoError> {
    let name = seq.topology.name();
    if name.len() > u16::MAX as usize {
        return Err(PoseIoError::Overflow("topology name"));
    }
    Ok(PoseFileHeader {
        version: VERSION,
        dims: seq.dims,
        n_keypoints: u16::try_from(seq.joint_count())
            .map_err(|_| PoseIoError::Overflow("n_keypoints"))?,
        n_frames: u32::try_from(seq.len()).map_err(|_| PoseIoError::Overflow("n_frames"))?,
        fps: seq.fps as f32,
        topology_name: name.to_owned(),
    })
}

/// Exact byte size `encode` would produce for `seq`.
pub fn encoded_size(seq: &PoseSequence) -> usize {
    FIXED_HEADER_LEN
        + seq.topology.name().len()
        + seq.len() * seq.joint_count() * (seq.dims.count() + 1) * 4
}

pub fn encode(seq: &PoseSequence) -> Result<Vec<u8>, PoseIoError> {
    validate(seq).map_err(PoseIoError::Invalid)?;
    let header = header_for(seq)?;
    let d = seq.dims.count();
    let mut out = Vec::with_capacity(header.len() + header.payload_len());
    header.write(&mut out);
    for frame in &seq.frames {
        for k in frame {
            for c in &k.coords[..d] {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
            out.extend_from_slice(&(k.confidence as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a pose file, resolving the topology by name among the built-in
/// ones and falling back to an anonymous point set.
pub fn decode(bytes: &[u8]) -> Result<PoseSequence, PoseIoError> {
    decode_inner(bytes, None)
}

/// Decodes a pose file against a caller-supplied topology (the sidecar JSON).
pub fn decode_with(bytes: &[u8], topology: &SkeletonTopology) -> Result<PoseSequence, PoseIoError> {
    decode_inner(bytes, Some(topology))
}

fn decode_inner(
    bytes: &[u8],
    topology: Option<&SkeletonTopology>,
) -> Result<PoseSequence, PoseIoError> {
    let header = PoseFileHeader::parse(bytes)?;
    let expected = header.len() + header.payload_len();
    if bytes.len() < expected {
        return Err(PoseIoError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(PoseIoError::TrailingBytes {
            expected,
            extra: bytes.len() - expected,
        });
    }
    let n_kp = header.n_keypoints as usize;
    let topology = match topology {
        Some(t) => t.clone(),
        None => SkeletonTopology::builtin(&header.topology_name)
            .filter(|t| t.joint_count() == n_kp)
            .map_or_else(
                || SkeletonTopology::point_set(header.topology_name.clone(), n_kp.max(1)),
                Ok,
            )
            .map_err(|_| PoseIoError::TopologyMismatch {
                name: header.topology_name.clone(),
                file: n_kp,
                topology: 0,
            })?,
    };
    if topology.joint_count() != n_kp {
        return Err(PoseIoError::TopologyMismatch {
            name: topology.name().to_owned(),
            file: n_kp,
            topology: topology.joint_count(),
        });
    }

    let d = header.dims.count();
    let mut values = bytes[header.len()..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut frames = Vec::with_capacity(header.n_frames as usize);
    for _ in 0..header.n_frames {
        let mut frame = Vec::with_capacity(n_kp);
        for _ in 0..n_kp {
            let mut k = Keypoint::default();
            for c in k.coords.iter_mut().take(d) {
                *c = values.next().unwrap();
            }
            k.confidence = values.next().unwrap();
            frame.push(k);
        }
        frames.push(frame);
    }
    Ok(PoseSequence::new(
        topology,
        header.dims,
        header.fps as f64,
        frames,
    ))
}

/// Metadata of a source video clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoProfile {
    pub duration_s: f64,
    pub fps: f64,
    pub width: u32,
    pub height: u32,
    pub size_bytes: f64,
}

impl VideoProfile {
    /// The 10 s, 4K, 60 fps, 27.7 MB reference clip.
    pub fn reference_4k60() -> Self {
        Self {
            duration_s: 10.0,
            fps: 60.0,
            width: 3840,
            height: 2160,
            size_bytes: 27.7e6,
        }
    }

    pub fn bitrate_bps(&self) -> f64 {
        self.size_bytes * 8.0 / self.duration_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeReduction {
    pub video_bytes: f64,
    pub pose_bytes: usize,
    pub ratio: f64,
    /// `log10(ratio)`.
    pub orders: f64,
}

pub fn size_reduction(video: &VideoProfile, seq: &PoseSequence) -> SizeReduction {
    let pose_bytes = encoded_size(seq);
    let ratio = video.size_bytes / pose_bytes as f64;
    SizeReduction {
        video_bytes: video.size_bytes,
        pose_bytes,
        ratio,
        orders: ratio.log10(),
    }
}
