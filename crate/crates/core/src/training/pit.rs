//! Permutation-invariant track-wise loss. For every assignment of target
//! tracks to output tracks the per-track costs are summed; the cheapest
//! assignment is kept per frame (or per clip).

use mff_tensor::{Graph, Scalar, Tensor, Var};

use crate::config::PitMode;
use crate::error::{Result, SeldError};
use crate::labels::{norm, LabelClip};

/// Track-wise targets. Inactive tracks hold class `classes` and a zero DoA.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub batch: usize,
    pub frames: usize,
    pub tracks: usize,
    pub classes: usize,
    /// `[batch, frames, tracks]`
    pub class: Vec<usize>,
    /// `[batch, frames, tracks]`
    pub doa: Vec<[f64; 3]>,
}

impl Targets {
    pub fn from_labels(clips: &[&LabelClip], tracks: usize, classes: usize) -> Result<Self> {
        let frames = clips.first().map_or(0, |c| c.frames.len());
        let mut class = Vec::with_capacity(clips.len() * frames * tracks);
        let mut doa = Vec::with_capacity(class.capacity());
        for clip in clips {
            if clip.frames.len() != frames {
                return Err(SeldError::data("label clips of different lengths in one batch"));
            }
            for f in &clip.frames {
                if f.len() > tracks {
                    return Err(SeldError::data(format!("{} events exceed {tracks} tracks", f.len())));
                }
                for t in 0..tracks {
                    match f.get(t) {
                        Some(&(c, d)) => {
                            if c >= classes {
                                return Err(SeldError::data(format!("class {c} out of range")));
                            }
                            if (norm(d) - 1.0).abs() > 1e-6 {
                                return Err(SeldError::data(format!("target DoA {d:?} is not a unit vector")));
                            }
                            class.push(c);
                            doa.push(d);
                        }
                        None => {
                            class.push(classes);
                            doa.push([0.0; 3]);
                        }
                    }
                }
            }
        }
        Ok(Self {
            batch: clips.len(),
            frames,
            tracks,
            classes,
            class,
            doa,
        })
    }

    pub fn active(&self, i: usize) -> bool {
        self.class[i] < self.classes
    }
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for first in 0..n {
        for rest in permutations(n - 1) {
            let mut p = vec![first];
            p.extend(rest.into_iter().map(|r| if r >= first { r + 1 } else { r }));
            out.push(p);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub sed: f64,
    pub doa: f64,
}

pub struct PitOutput {
    pub loss: Var,
    /// Chosen permutation per frame, `[batch * frames]`; output track `p`
    /// is matched with target track `perm[p]`.
    pub perms: Vec<Vec<usize>>,
    pub sed_loss: f64,
    pub doa_loss: f64,
}

/// Cost of matching output track `p` with target track `q` in one frame:
/// `w_sed * CE / tracks + w_doa * |doa_p - doa_q|^2 * active_q / (3 tracks)`.
/// Returns the detection and localization parts separately.
fn pair_cost(log_probs: &[f64], doa: &[f64], tgt: &Targets, q: usize, w: LossWeights) -> (f64, f64) {
    let n = tgt.tracks as f64;
    let ce = -log_probs[tgt.class[q]];
    let se = if tgt.active(q) {
        (0..3).map(|k| (doa[k] - tgt.doa[q][k]).powi(2)).sum::<f64>()
    } else {
        0.0
    };
    (w.sed * ce / n, w.doa * se / (3.0 * n))
}

/// Sum of per-track costs in ascending order, so that the value of an
/// assignment does not depend on the order its terms were produced.
fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// `sed_logits: [B, L, tracks, classes + 1]`, `doa: [B, L, tracks, 3]`.
pub fn pit_loss<T: Scalar>(
    g: &Graph<T>,
    sed_logits: Var,
    doa: Var,
    tgt: &Targets,
    w: LossWeights,
    mode: PitMode,
) -> Result<PitOutput> {
    let (lv, dv) = (g.value(sed_logits), g.value(doa));
    let (b, l, n, k) = (tgt.batch, tgt.frames, tgt.tracks, tgt.classes + 1);
    if lv.shape() != [b, l, n, k] || dv.shape() != [b, l, n, 3] {
        return Err(SeldError::data(format!(
            "PIT shapes: sed {:?}, doa {:?}, targets [{b}, {l}, {n}]",
            lv.shape(),
            dv.shape()
        )));
    }
    if b * l == 0 {
        return Err(SeldError::data("PIT loss over an empty batch"));
    }
    let logits: Vec<f64> = lv.data().iter().map(|&v| Scalar::to_f64(v)).collect();
    let doas: Vec<f64> = dv.data().iter().map(|&v| Scalar::to_f64(v)).collect();
    let frames = b * l;
    let log_probs: Vec<Vec<f64>> = logits.chunks(k).map(log_softmax).collect();
    let perms = permutations(n);

    // cost[frame][perm] = (total, sed part, doa part)
    let cost: Vec<Vec<(f64, f64, f64)>> = (0..frames)
        .map(|f| {
            perms
                .iter()
                .map(|perm| {
                    let parts: Vec<(f64, f64)> = (0..n)
                        .map(|p| {
                            let o = f * n + p;
                            pair_cost(&log_probs[o], &doas[o * 3..o * 3 + 3], tgt, f * n + perm[p], w)
                        })
                        .collect();
                    let total = sorted_sum(parts.iter().map(|c| c.0 + c.1).collect());
                    let sed = sorted_sum(parts.iter().map(|c| c.0).collect());
                    let doa = sorted_sum(parts.iter().map(|c| c.1).collect());
                    (total, sed, doa)
                })
                .collect()
        })
        .collect();
    let argmin = |vals: &mut dyn Iterator<Item = f64>| {
        let mut best = (0, f64::INFINITY);
        for (i, v) in vals.enumerate() {
            if v < best.1 {
                best = (i, v);
            }
        }
        best.0
    };
    let choice: Vec<usize> = match mode {
        PitMode::Frame => (0..frames).map(|f| argmin(&mut cost[f].iter().map(|c| c.0))).collect(),
        PitMode::Clip => (0..b)
            .flat_map(|bi| {
                let totals = (0..perms.len()).map(|pi| (0..l).map(|t| cost[bi * l + t][pi].0).sum::<f64>());
                let best = argmin(&mut totals.collect::<Vec<_>>().into_iter());
                std::iter::repeat_n(best, l)
            })
            .collect(),
    };
    let nf = frames as f64;
    let loss: f64 = (0..frames).map(|f| cost[f][choice[f]].0).sum::<f64>() / nf;
    let sed_loss: f64 = (0..frames).map(|f| cost[f][choice[f]].1).sum::<f64>() / nf;
    let doa_loss: f64 = (0..frames).map(|f| cost[f][choice[f]].2).sum::<f64>() / nf;
    if !loss.is_finite() {
        return Err(SeldError::NonFinite(format!("PIT loss is {loss}")));
    }
    let chosen: Vec<Vec<usize>> = choice.iter().map(|&c| perms[c].clone()).collect();

    let mut dlogits = vec![0.0; logits.len()];
    let mut ddoa = vec![0.0; doas.len()];
    let nt = n as f64;
    for f in 0..frames {
        for p in 0..n {
            let o = f * n + p;
            let q = f * n + chosen[f][p];
            for (c, d) in dlogits[o * k..(o + 1) * k].iter_mut().enumerate() {
                let onehot = if c == tgt.class[q] { 1.0 } else { 0.0 };
                *d = w.sed / nt * (log_probs[o][c].exp() - onehot) / nf;
            }
            if tgt.active(q) {
                for j in 0..3 {
                    ddoa[o * 3 + j] = w.doa / (3.0 * nt) * 2.0 * (doas[o * 3 + j] - tgt.doa[q][j]) / nf;
                }
            }
        }
    }
    let (ls, ds) = (lv.shape().to_vec(), dv.shape().to_vec());
    let var = g.push_op(
        Tensor::scalar(T::from_f64(loss)),
        &[sed_logits, doa],
        move |dy, needs| {
            let s = Scalar::to_f64(dy.item());
            let scaled =
                |v: &[f64], shape: &[usize]| Tensor::new(shape, v.iter().map(|x| T::from_f64(x * s)).collect());
            Ok(vec![
                needs[0].then(|| scaled(&dlogits, &ls)).transpose()?,
                needs[1].then(|| scaled(&ddoa, &ds)).transpose()?,
            ])
        },
    );
    Ok(PitOutput {
        loss: var,
        perms: chosen,
        sed_loss,
        doa_loss,
    })
}
