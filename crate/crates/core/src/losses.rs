//! Training objectives: two-stage Chamfer reconstruction, smooth-L1 matching
//! of controlling points, the scale-dependent umbrella shape term, and their
//! weighted total.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{chamfer, GeometryError, LaplacianGraph};
use crate::tensor::{Tensor, Var};

/// Smooth-L1 transition parameter for the matching loss.
pub const MATCH_SIGMA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Matching-loss weight.
    pub alpha: f64,
    /// Shape-loss weight.
    pub beta: f64,
    /// Weight of the final-output Chamfer term inside the reconstruction loss.
    pub lambda: f64,
    /// Multiplier on the whole reconstruction loss.
    pub recons_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1000.0,
            beta: 0.5,
            lambda: 3.0,
            recons_scale: 1000.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.alpha, self.beta, self.lambda, self.recons_scale];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(format!("loss weights must be finite and non-negative: {self:?}"))
        }
    }
}

/// Scalar loss values for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cd_intermediate: f64,
    pub cd_final: f64,
    #[serde(rename = "match")]
    pub matching: f64,
    pub shape: f64,
    pub total: f64,
}

impl LossReport {
    /// Recomputes the weighted total from the components.
    pub fn weighted_total(&self, w: &LossWeights, lambda: f64) -> f64 {
        w.recons_scale * (self.cd_intermediate + lambda * self.cd_final)
            + w.alpha * self.matching
            + w.beta * self.shape
    }

    /// Component-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len() as f64;
        let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        LossReport {
            cd_intermediate: sum(|r| r.cd_intermediate),
            cd_final: sum(|r| r.cd_final),
            matching: sum(|r| r.matching),
            shape: sum(|r| r.shape),
            total: sum(|r| r.total),
        }
    }
}

/// `CD(P_s, P_gt) + λ·CD(P_o, P_gt)`.
pub fn reconstruction_loss<'t>(
    p_s: Var<'t>,
    p_o: Var<'t>,
    p_gt: Var<'t>,
    lambda: f64,
) -> Result<Var<'t>, GeometryError> {
    let first = chamfer(p_s, p_gt)?;
    if lambda == 0.0 {
        return Ok(first);
    }
    let second = chamfer(p_o, p_gt)?;
    Ok(first.add(second.scale(lambda))?)
}

/// Mean smooth-L1 (σ = 2) over every coordinate of the controlling points'
/// displacement. Point `i` in both clouds is the same controlling point.
pub fn matching_loss<'t>(before: Var<'t>, after: Var<'t>) -> Result<Var<'t>, GeometryError> {
    Ok(after.sub(before)?.huber(MATCH_SIGMA).mean_all()?)
}

/// Which reading of the umbrella shape term to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeLossForm {
    /// `Σ_x ‖u_x‖` with a per-vertex edge-length sum `e_x`.
    PerVertex,
    /// Norm of the grand sum over all edges with one global `e`.
    Global,
    /// `mean_x ‖u_x(P_o) − u_x(before)‖`: penalizes how much each umbrella
    /// vector changes across the deformation, zero at the identity.
    Change,
}

/// Per-edge unit directions and lengths plus per-group `e` and `Σ dir`.
struct Umbrella {
    dirs: Vec<[f64; 3]>,
    lens: Vec<f64>,
    e: Vec<f64>,
    s: Vec<[f64; 3]>,
}

impl Umbrella {
    fn new(pts: &[[f64; 3]], graph: &LaplacianGraph, groups: usize) -> Self {
        let (n, k) = (graph.len(), graph.k());
        let mut u = Umbrella {
            dirs: vec![[0.0; 3]; n * k],
            lens: vec![0.0; n * k],
            e: vec![0.0; groups],
            s: vec![[0.0; 3]; groups],
        };
        for i in 0..n {
            let g = if groups == 1 { 0 } else { i };
            for (slot, &j) in graph.neighbors(i).iter().enumerate() {
                let d = [pts[i][0] - pts[j][0], pts[i][1] - pts[j][1], pts[i][2] - pts[j][2]];
                let l = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if l == 0.0 {
                    continue;
                }
                let edge = i * k + slot;
                u.lens[edge] = l;
                u.dirs[edge] = [d[0] / l, d[1] / l, d[2] / l];
                u.e[g] += l;
                for a in 0..3 {
                    u.s[g][a] += u.dirs[edge][a];
                }
            }
        }
        if groups == 1 {
            u.s[0] = Self::paired_sum(&u, graph);
        }
        u
    }

    /// Global `Σ dir` with opposite edges cancelled before summing, so a
    /// symmetric edge set gives exactly zero.
    fn paired_sum(u: &Umbrella, graph: &LaplacianGraph) -> [f64; 3] {
        let k = graph.k();
        let mut net: BTreeMap<(usize, usize), (i64, usize)> = BTreeMap::new();
        for i in 0..graph.len() {
            for (slot, &j) in graph.neighbors(i).iter().enumerate() {
                let edge = i * k + slot;
                if u.lens[edge] == 0.0 {
                    continue;
                }
                let entry = net.entry((i.min(j), i.max(j))).or_insert((0, edge));
                entry.0 += if i < j { 1 } else { -1 };
                if i < j {
                    entry.1 = edge;
                }
            }
        }
        let mut s = [0.0; 3];
        for (&(lo, _), &(count, edge)) in &net {
            if count == 0 {
                continue;
            }
            // `edge` may run either way; orient it from `lo`.
            let sign = if edge / k == lo { 1.0 } else { -1.0 };
            for a in 0..3 {
                s[a] += count as f64 * sign * u.dirs[edge][a];
            }
        }
        s
    }

    /// `u_g = 2 s_g / e_g`, zero for groups without edges.
    fn vector(&self, g: usize) -> [f64; 3] {
        if self.e[g] == 0.0 {
            return [0.0; 3];
        }
        self.s[g].map(|v| 2.0 * v / self.e[g])
    }
}

/// Scale-dependent umbrella shape loss on `p_o`, using the graph built on
/// the pre-deformation cloud `before` (same point order).
///
/// For a vertex `x` with neighbors `A(x)`, `e_x = Σ ‖x − y‖` and
/// `u_x = Σ 2(x − y) / (e_x ‖x − y‖)`. Coincident pairs contribute nothing
/// and are left out of `e_x`. Only `p_o` receives a gradient.
pub fn shape_preserving_loss<'t>(
    before: Var<'t>,
    p_o: Var<'t>,
    graph: &LaplacianGraph,
    form: ShapeLossForm,
) -> Result<Var<'t>, GeometryError> {
    let n = graph.len();
    let (bs, os) = (before.shape(), p_o.shape());
    if bs != os || os != [n, 3] {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "shape_preserving_loss",
            detail: format!("graph of {n} points, before {bs:?}, after {os:?}"),
        }
        .into());
    }
    let k = graph.k();
    let groups = match form {
        ShapeLossForm::Global => 1,
        ShapeLossForm::PerVertex | ShapeLossForm::Change => n,
    };
    let group_of = move |i: usize| if groups == 1 { 0 } else { i };
    let um = Umbrella::new(&p_o.value().to_points()?, graph, groups);
    let reference = match form {
        ShapeLossForm::Change => Some(Umbrella::new(&before.value().to_points()?, graph, groups)),
        _ => None,
    };

    let reduce = match form {
        ShapeLossForm::Change => 1.0 / n.max(1) as f64,
        _ => 1.0,
    };
    let mut value = 0.0;
    // Gradient of the loss w.r.t. each group's umbrella vector.
    let mut unit = vec![[0.0f64; 3]; groups];
    for g in 0..groups {
        let mut v = um.vector(g);
        if let Some(r) = &reference {
            let rv = r.vector(g);
            v = [v[0] - rv[0], v[1] - rv[1], v[2] - rv[2]];
        }
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        value += norm;
        if norm > 0.0 {
            unit[g] = v.map(|c| c / norm);
        }
    }
    let neighbors = graph.flat().to_vec();
    Ok(p_o.tape().custom("shape_preserving", &[before, p_o], Tensor::scalar(value * reduce), move |grad| {
        let gout = grad.item() * reduce;
        let Umbrella { dirs, lens, e, s } = um;
        let mut gp = vec![0.0; n * 3];
        for i in 0..n {
            let g = group_of(i);
            if e[g] == 0.0 {
                continue;
            }
            let gu = unit[g];
            let gs = gu[0] * s[g][0] + gu[1] * s[g][1] + gu[2] * s[g][2];
            for slot in 0..k {
                let edge = i * k + slot;
                let l = lens[edge];
                if l == 0.0 {
                    continue;
                }
                let nd = dirs[edge];
                let gn = gu[0] * nd[0] + gu[1] * nd[1] + gu[2] * nd[2];
                let j = neighbors[edge];
                for a in 0..3 {
                    // Chain rule through u = 2s/e for this edge vector x_i − x_j.
                    let dd = -2.0 * gs / (e[g] * e[g]) * nd[a] + 2.0 / (e[g] * l) * (gu[a] - gn * nd[a]);
                    gp[i * 3 + a] += gout * dd;
                    gp[j * 3 + a] -= gout * dd;
                }
            }
        }
        vec![None, Some(Tensor::with_data(&[n, 3], gp))]
    }))
}

/// Individual loss terms from one forward pass, as tape nodes.
pub struct LossTerms<'t> {
    pub cd_intermediate: Var<'t>,
    pub cd_final: Var<'t>,
    pub matching: Var<'t>,
    pub shape: Var<'t>,
}

/// `recons_scale·(CD_s + λ·CD_o) + α·L_match + β·L_shape` and its report.
pub fn total_loss<'t>(
    terms: &LossTerms<'t>,
    weights: &LossWeights,
    lambda: f64,
) -> Result<(Var<'t>, LossReport), GeometryError> {
    let recons = terms.cd_intermediate.add(terms.cd_final.scale(lambda))?;
    let total = recons
        .scale(weights.recons_scale)
        .add(terms.matching.scale(weights.alpha))?
        .add(terms.shape.scale(weights.beta))?;
    let report = LossReport {
        cd_intermediate: terms.cd_intermediate.item(),
        cd_final: terms.cd_final.item(),
        matching: terms.matching.item(),
        shape: terms.shape.item(),
        total: total.item(),
    };
    Ok((total, report))
}
