//! Tracking and prediction protocol: map every `k`-th frame only and score
//! renders at withheld frames, either between consumed frames
//! (interpolation) or beyond the latest one (extrapolation).

use serde::{Deserialize, Serialize};

use crate::config::ManageConfig;
use crate::error::{Error, Result};
use crate::eval::psnr;
use crate::frame::{flow_is_known, FrameBundle, UNKNOWN_FLOW};
use crate::geometry::CameraModel;
use crate::image::{FlowImage, Image};
use crate::pipeline::{Mapper, RunOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    /// Target frame `t - k + offset`, strictly between two consumed frames.
    Interpolate,
    /// Target frame `t + offset`, ahead of the latest consumed frame. Only
    /// offset 0 is scored at the first consumed frame.
    Extrapolate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolCell {
    pub mode: ProtocolMode,
    pub offset: i64,
    /// Number of target frames scored.
    pub frames: usize,
    pub psnr: Option<f64>,
    /// Mean over target frames with a non-empty motion mask.
    pub dyna_psnr: Option<f64>,
    /// Set when no target frame could be scored.
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolTable {
    pub interval: i64,
    pub consumed_frames: Vec<i64>,
    /// Scores at the consumed frames themselves.
    pub mapping_psnr: f64,
    pub mapping_dyna_psnr: Option<f64>,
    pub cells: Vec<ProtocolCell>,
}

impl ProtocolTable {
    pub fn cell(&self, mode: ProtocolMode, offset: i64) -> Option<&ProtocolCell> {
        self.cells.iter().find(|c| c.mode == mode && c.offset == offset)
    }
}

fn sample_bilinear(flow: &FlowImage, u: f64, v: f64) -> Option<[f64; 2]> {
    let (w, h) = flow.dims();
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return None;
    }
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let mut out = [0.0; 2];
    for (x, y, wt) in [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ] {
        let f = flow[(x, y)];
        if !flow_is_known(&f) {
            return None;
        }
        out[0] += wt * f[0];
        out[1] += wt * f[1];
    }
    Some(out)
}

/// Chains single-step backward flows, newest first, into one flow from the
/// newest frame to the frame before the oldest. Pixels whose chain leaves
/// the image or touches an unknown vector become unknown.
pub fn compose_backward_flows(flows: &[&FlowImage]) -> Result<FlowImage> {
    let first = flows
        .first()
        .ok_or_else(|| Error::InvalidParameter("no flows to compose".into()))?;
    let (w, h) = first.dims();
    if flows.iter().any(|f| f.dims() != (w, h)) {
        return Err(Error::Shape("flows to compose differ in size".into()));
    }
    Ok(Image::from_fn(w, h, |x, y| {
        let start = first[(x, y)];
        if !flow_is_known(&start) {
            return [UNKNOWN_FLOW * 10.0; 2];
        }
        let (mut u, mut v) = (x as f64 + start[0], y as f64 + start[1]);
        for f in &flows[1..] {
            match sample_bilinear(f, u, v) {
                Some(d) => {
                    u += d[0];
                    v += d[1];
                }
                None => return [UNKNOWN_FLOW * 10.0; 2],
            }
        }
        [u - x as f64, v - y as f64]
    }))
}

#[derive(Default)]
struct Acc {
    psnr: Vec<f64>,
    dyna: Vec<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs the protocol on consecutive `frames` (timestamps `0..n`). Frames
/// `0, k, 2k, ...` are mapped, with their backward flow composed across the
/// skipped frames; every other frame is only used as withheld ground truth.
pub fn run_track_predict_protocol(
    frames: &[FrameBundle],
    cam: &CameraModel,
    config: &ManageConfig,
    options: &RunOptions,
    k: i64,
    targets: &[i64],
) -> Result<ProtocolTable> {
    if k < 1 {
        return Err(Error::InvalidParameter(format!("interval must be >= 1, got {k}")));
    }
    for (i, f) in frames.iter().enumerate() {
        if f.timestamp != i as i64 {
            return Err(Error::InvalidParameter(format!(
                "protocol needs consecutive frames from 0, found timestamp {} at position {i}",
                f.timestamp
            )));
        }
    }
    let n = frames.len() as i64;
    let mut mapper = Mapper::new(*cam, config.clone(), options.clone())?;
    let mut consumed = Vec::new();
    let (mut map_psnr, mut map_dyna) = (Vec::new(), Vec::new());
    let mut interp: Vec<Acc> = targets.iter().map(|_| Acc::default()).collect();
    let mut extrap: Vec<Acc> = targets.iter().map(|_| Acc::default()).collect();

    let mut t = 0;
    while t < n {
        let mut frame = frames[t as usize].clone();
        if t > 0 && k > 1 {
            let chain: Option<Vec<&FlowImage>> =
                (t - k + 1..=t).rev().map(|s| frames[s as usize].flow_back.as_ref()).collect();
            frame.flow_back = chain.map(|c| compose_backward_flows(&c)).transpose()?;
        }
        let (m, _) = mapper.process_frame(&frame)?;
        consumed.push(t);
        map_psnr.push(m.psnr);
        map_dyna.extend(m.dyna_psnr);

        for (i, &o) in targets.iter().enumerate() {
            let score = |target: i64, acc: &mut Acc| -> Result<()> {
                let gt = &frames[target as usize];
                let pred = mapper.render_at(&gt.pose, target as f64)?;
                acc.psnr.push(psnr(&pred, &gt.rgb, None)?);
                if let Some(mask) = gt.motion_mask.as_ref().filter(|m| m.count() > 0) {
                    acc.dyna.push(psnr(&pred, &gt.rgb, Some(mask))?);
                }
                Ok(())
            };
            if 0 < o && o < k && t >= k {
                score(t - k + o, &mut interp[i])?;
            }
            // predictions need an observed motion, so they start at the second consumed frame
            if o >= 0 && t + o < n && (o == 0 || t >= k) {
                score(t + o, &mut extrap[i])?;
            }
        }
        t += k;
    }

    let mut cells = Vec::new();
    for (mode, accs) in [(ProtocolMode::Interpolate, &interp), (ProtocolMode::Extrapolate, &extrap)] {
        for (&offset, acc) in targets.iter().zip(accs) {
            cells.push(ProtocolCell {
                mode,
                offset,
                frames: acc.psnr.len(),
                psnr: mean(&acc.psnr),
                dyna_psnr: mean(&acc.dyna),
                skipped: acc.psnr.is_empty(),
            });
        }
    }
    Ok(ProtocolTable {
        interval: k,
        consumed_frames: consumed,
        mapping_psnr: mean(&map_psnr).unwrap_or(0.0),
        mapping_dyna_psnr: mean(&map_dyna),
        cells,
    })
}
