//! Binary container for per-layer optimizer state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0       8 bytes   magic "DCTLRCK1"
//! 8       u64       header length H in bytes
//! 16      H bytes   UTF-8 JSON header (see docs/checkpoint.md)
//! 16 + H  ...       payload: f64 arrays (column-major) and raw u8 codes,
//!                   addressed by byte offsets relative to the payload start
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::efq::{ErrorFeedback, QuantBuffer};
use crate::error::{Error, Result};
use crate::optimizer::LayerState;
use crate::projector::{DenseProjector, NormMode, Projection, Selection, Side};
use crate::transform::{BasisKind, BasisRegistry};

pub const MAGIC: &[u8; 8] = b"DCTLRCK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    layers: Vec<LayerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixRef {
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct BytesRef {
    len: u64,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ProjectionHeader {
    Columns {
        basis: BasisKind,
        order: usize,
        norm_mode: NormMode,
        indices_crt: Vec<usize>,
        indices_prev: Option<Vec<usize>>,
    },
    Dense {
        crt: MatrixRef,
        prev: Option<MatrixRef>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
enum EfHeader {
    None,
    Dense { data: MatrixRef },
    Quant8 { group_size: usize, codes: BytesRef, scales: MatrixRef, zero_points: MatrixRef },
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerHeader {
    name: String,
    rows: usize,
    cols: usize,
    side: Side,
    step: u64,
    refreshes: u64,
    stream: u64,
    projection: Option<ProjectionHeader>,
    m: MatrixRef,
    v: MatrixRef,
    ef: EfHeader,
}

#[derive(Default)]
struct Payload {
    bytes: Vec<u8>,
}

impl Payload {
    fn matrix(&mut self, m: &DMatrix<f64>) -> MatrixRef {
        let offset = self.bytes.len() as u64;
        for x in m.iter() {
            self.bytes.extend_from_slice(&x.to_le_bytes());
        }
        MatrixRef { rows: m.nrows(), cols: m.ncols(), offset }
    }

    fn vector(&mut self, v: &[f64]) -> MatrixRef {
        self.matrix(&DMatrix::from_column_slice(v.len(), 1, v))
    }

    fn raw(&mut self, b: &[u8]) -> BytesRef {
        let offset = self.bytes.len() as u64;
        self.bytes.extend_from_slice(b);
        BytesRef { len: b.len() as u64, offset }
    }
}

fn projection_header(state: &LayerState, payload: &mut Payload) -> Option<ProjectionHeader> {
    match (&state.current, &state.previous) {
        (None, _) => None,
        (Some(Projection::Columns { basis, selection }), prev) => Some(ProjectionHeader::Columns {
            basis: basis.kind(),
            order: basis.order(),
            norm_mode: selection.norm_mode(),
            indices_crt: selection.indices().to_vec(),
            indices_prev: prev.as_ref().and_then(Projection::selection).map(|s| s.indices().to_vec()),
        }),
        (Some(Projection::Dense(crt)), prev) => {
            let crt = payload.matrix(&crt.matrix);
            let prev = match prev {
                Some(Projection::Dense(p)) => Some(payload.matrix(&p.matrix)),
                _ => None,
            };
            Some(ProjectionHeader::Dense { crt, prev })
        }
    }
}

/// Writes named layer states into one container.
pub fn save<W: Write>(mut out: W, layers: &[(&str, &LayerState)]) -> Result<()> {
    let mut payload = Payload::default();
    let mut headers = Vec::with_capacity(layers.len());
    for (name, state) in layers {
        let projection = projection_header(state, &mut payload);
        let m = payload.matrix(&state.m);
        let v = payload.matrix(&state.v);
        let ef = match &state.ef {
            ErrorFeedback::Absent => EfHeader::None,
            ErrorFeedback::Dense(d) => EfHeader::Dense { data: payload.matrix(d) },
            ErrorFeedback::Quant8(q) => EfHeader::Quant8 {
                group_size: q.group_size(),
                codes: payload.raw(q.codes()),
                scales: payload.vector(q.scales()),
                zero_points: payload.vector(q.zero_points()),
            },
        };
        headers.push(LayerHeader {
            name: name.to_string(),
            rows: state.rows,
            cols: state.cols,
            side: state.side,
            step: state.step,
            refreshes: state.refreshes,
            stream: state.stream,
            projection,
            m,
            v,
            ef,
        });
    }
    let header = serde_json::to_vec(&Header { version: VERSION, layers: headers })?;
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&payload.bytes)?;
    out.flush()?;
    Ok(())
}

struct Reader<'a> {
    payload: &'a [u8],
}

impl Reader<'_> {
    fn slice(&self, offset: u64, len: usize) -> Result<&[u8]> {
        let start = usize::try_from(offset).map_err(|_| Error::Checkpoint("offset overflow".into()))?;
        start
            .checked_add(len)
            .and_then(|end| self.payload.get(start..end))
            .ok_or_else(|| Error::Checkpoint(format!("blob at {offset} (+{len}) past end of payload")))
    }

    fn matrix(&self, r: &MatrixRef) -> Result<DMatrix<f64>> {
        let bytes = self.slice(r.offset, r.rows * r.cols * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(DMatrix::from_vec(r.rows, r.cols, data))
    }

    fn raw(&self, r: &BytesRef) -> Result<Vec<u8>> {
        Ok(self.slice(r.offset, r.len as usize)?.to_vec())
    }
}

/// Reads every layer back. Column projections are re-attached to bases
/// from `bases`, built on demand.
pub fn load<R: Read>(mut input: R, bases: &BasisRegistry) -> Result<BTreeMap<String, LayerState>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    let rd = Reader { payload: &payload };

    let mut out = BTreeMap::new();
    for h in header.layers {
        let (current, previous) = match h.projection {
            None => (None, None),
            Some(ProjectionHeader::Columns { basis, order, norm_mode, indices_crt, indices_prev }) => {
                let basis = bases.get(basis, order)?;
                let mk = |idx: Vec<usize>| -> Result<Projection> {
                    let selection = Selection::new(idx, h.side, norm_mode, order)?;
                    Ok(Projection::Columns { basis: basis.clone(), selection })
                };
                (Some(mk(indices_crt)?), indices_prev.map(mk).transpose()?)
            }
            Some(ProjectionHeader::Dense { crt, prev }) => {
                let mk = |r: &MatrixRef| -> Result<Projection> {
                    Ok(Projection::Dense(DenseProjector { matrix: rd.matrix(r)?, side: h.side }))
                };
                (Some(mk(&crt)?), prev.as_ref().map(mk).transpose()?)
            }
        };
        let ef = match &h.ef {
            EfHeader::None => ErrorFeedback::Absent,
            EfHeader::Dense { data } => ErrorFeedback::Dense(rd.matrix(data)?),
            EfHeader::Quant8 { group_size, codes, scales, zero_points } => {
                ErrorFeedback::Quant8(QuantBuffer::from_parts(
                    h.rows,
                    h.cols,
                    *group_size,
                    rd.raw(codes)?,
                    rd.matrix(scales)?.as_slice().to_vec(),
                    rd.matrix(zero_points)?.as_slice().to_vec(),
                )?)
            }
        };
        let (m, v) = (rd.matrix(&h.m)?, rd.matrix(&h.v)?);
        if m.shape() != v.shape() {
            return Err(Error::Checkpoint(format!("layer {}: m and v shapes differ", h.name)));
        }
        if let Some(p) = &current {
            let want = match h.side {
                Side::Right => (h.rows, p.rank()),
                Side::Left => (p.rank(), h.cols),
            };
            if m.shape() != want {
                return Err(Error::Checkpoint(format!("layer {}: moments are {:?}, expected {want:?}", h.name, m.shape())));
            }
        }
        if let ErrorFeedback::Dense(e) = &ef {
            if e.shape() != (h.rows, h.cols) {
                return Err(Error::Checkpoint(format!("layer {}: error buffer has wrong shape", h.name)));
            }
        }
        let state = LayerState {
            rows: h.rows,
            cols: h.cols,
            side: h.side,
            m,
            v,
            current,
            previous,
            ef,
            step: h.step,
            refreshes: h.refreshes,
            stream: h.stream,
        };
        out.insert(h.name, state);
    }
    Ok(out)
}
