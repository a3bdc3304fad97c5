//! Progressive sliced iterative PCA for the gated FFN.
//!
//! The intermediate width shrinks to `P` through `qc` (folded into `W_u` and
//! `W_g`) and `qr` (folded into `W_d`). `qc` starts as a channel selection,
//! `qr` is a ridge fit of the full intermediate from the compressed one, and
//! optionally `qc` is refined slice by slice against the nonlinear output.
//!
//! The slice objective is `‖(Yʳ − F) Qr‖²` with `Yʳ = Y Qr⁺`, which equals
//! `‖Y − F Qr‖²` up to a constant, so slice updates and `qr` re-solves
//! decrease the same recorded objective `‖Y − F Qr‖² + λ‖Qr‖²`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pseudo_inverse, ridge_solve, ridge_solve_normal, DenseMatrix, GramAccumulator, Ridge};
use crate::tmodel::{silu, Checkpoint, LayerTrace};


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnTransforms {
    /// `D_inter × P`.
    pub qc: DenseMatrix,
    /// `P × D_inter`.
    pub qr: DenseMatrix,
    /// Channels picked by the initial selection, ascending.
    pub selected: Vec<usize>,
}

impl FfnTransforms {
    pub fn identity(inter: usize) -> Self {
        Self {
            qc: DenseMatrix::identity(inter),
            qr: DenseMatrix::identity(inter),
            selected: (0..inter).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.qc.cols()
    }
}

/// Calibration rows of one FFN: the up and gate projections and the gated
/// intermediate `Y` entering `W_d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnRows {
    pub up: DenseMatrix,
    pub gate: DenseMatrix,
    pub down: DenseMatrix,
}

impl FfnRows {
    pub fn from_trace(t: &LayerTrace) -> Self {
        if !t.down_input.sample_is_complete() {
            log::warn!(
                "FFN row sample holds {} of {} calibration rows",
                t.down_input.sample.rows(),
                t.down_input.rows_seen()
            );
        }
        Self { up: t.up_out.sample.clone(), gate: t.gate_out.sample.clone(), down: t.down_input.sample.clone() }
    }
}

/// Indices of the `p` largest entries, ascending; ties go to the lower index.
pub fn top_channels(importance: &[f64], p: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    let mut sel = order[..p.min(order.len())].to_vec();
    sel.sort_unstable();
    sel
}

/// 0/1 `n × idx.len()` matrix with a single one per column.
pub fn selection_matrix(n: usize, idx: &[usize]) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(n, idx.len());
    for (c, &r) in idx.iter().enumerate() {
        m[(r, c)] = 1.0;
    }
    m
}

/// Select the `p` channels of highest `‖X_d col‖² · ‖W_d row‖²`.
pub fn init_qc_select(x_d: &GramAccumulator, w_d: &DenseMatrix, p: usize) -> Result<(DenseMatrix, Vec<usize>)> {
    if p == 0 || p > x_d.dim {
        return Err(Error::OutOfRange { what: "FFN width", detail: format!("P={p}, D_inter={}", x_d.dim) });
    }
    let imp = crate::headprune::channel_importance_gram(x_d, w_d)?;
    let sel = top_channels(&imp, p);
    Ok((selection_matrix(x_d.dim, &sel), sel))
}

/// `(Out_u qc) ⊙ silu(Out_g qc)`.
pub fn compressed_intermediate(rows: &FfnRows, qc: &DenseMatrix) -> Result<DenseMatrix> {
    rows.up.matmul(qc)?.hadamard(&rows.gate.matmul(qc)?.map(silu))
}

/// Ridge fit of `Y` from the compressed intermediate, from rows.
pub fn solve_qr(rows: &FfnRows, qc: &DenseMatrix, lambda: Ridge) -> Result<DenseMatrix> {
    ridge_solve(&compressed_intermediate(rows, qc)?, &rows.down, lambda)
}

/// [`solve_qr`] for a selection `qc`: the compressed intermediate is exactly
/// the selected columns of `Y`, so the fit needs only the Gram of `Y`.
pub fn solve_qr_selected(x_d: &GramAccumulator, selected: &[usize], lambda: Ridge) -> Result<DenseMatrix> {
    let atb = x_d.gram.select_rows(selected);
    let ata = atb.select_columns(selected);
    ridge_solve_normal(&ata, &atb, lambda)
}

/// `‖Y − F Qr‖² + λ‖Qr‖²` on the calibration rows.
pub fn objective(rows: &FfnRows, qc: &DenseMatrix, qr: &DenseMatrix, lambda: f64) -> Result<f64> {
    let f = compressed_intermediate(rows, qc)?;
    Ok(rows.down.sub(&f.matmul(qr)?)?.frobenius_norm_sq() + lambda * qr.frobenius_norm_sq())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SliceModel {
    /// `(C_u + X_u Q) ⊙ silu(C_g + X_g Q)`, the real FFN.
    #[default]
    Gated,
    /// `C_u + X_u Q`: no activation and no gate, a least-squares probe.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub enabled: bool,
    pub slice_width: usize,
    pub sweeps: usize,
    pub steps_per_slice: usize,
    /// Bound on `|qc|` entries.
    pub amplitude: f64,
    pub model: SliceModel,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { enabled: false, slice_width: 16, sweeps: 4, steps_per_slice: 8, amplitude: 1.0, model: SliceModel::Gated }
    }
}

/// Running state while optimising slices of `qc`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceState {
    pub slice_width: usize,
    /// `Out_u qc` and `Out_g qc` over every slice.
    pub c_u: DenseMatrix,
    pub c_g: DenseMatrix,
    /// `Y Qr⁺`.
    pub y_r: DenseMatrix,
    /// `Qr Qrᵀ`, the metric under which the slice objective matches the
    /// full reconstruction error.
    pub metric: DenseMatrix,
}

impl SliceState {
    pub fn new(rows: &FfnRows, qc: &DenseMatrix, qr: &DenseMatrix, slice_width: usize) -> Result<Self> {
        if slice_width == 0 {
            return Err(Error::Config("slice width must be positive".into()));
        }
        Ok(Self {
            slice_width,
            c_u: rows.up.matmul(qc)?,
            c_g: rows.gate.matmul(qc)?,
            y_r: rows.down.matmul(&pseudo_inverse(qr)?)?,
            metric: qr.mul_t(qr),
        })
    }

    /// Slices `[start, end)` partitioning `0..n`.
    pub fn slices(&self, n: usize) -> Vec<(usize, usize)> {
        (0..n).step_by(self.slice_width).map(|s| (s, (s + self.slice_width).min(n))).collect()
    }
}

struct SliceProblem<'a> {
    xu: DenseMatrix,
    xg: DenseMatrix,
    /// Contribution of every other slice.
    cu: DenseMatrix,
    cg: DenseMatrix,
    y_r: &'a DenseMatrix,
    metric: &'a DenseMatrix,
    model: SliceModel,
}

impl SliceProblem<'_> {
    fn pre(&self, q: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
        let mut zu = self.xu.mul(q);
        zu.add_assign(&self.cu);
        let mut zg = self.xg.mul(q);
        zg.add_assign(&self.cg);
        (zu, zg)
    }

    fn output(&self, zu: &DenseMatrix, zg: &DenseMatrix) -> DenseMatrix {
        match self.model {
            SliceModel::Gated => {
                let mut f = zu.clone();
                for (v, g) in f.as_mut_slice().iter_mut().zip(zg.as_slice()) {
                    *v *= silu(*g);
                }
                f
            }
            SliceModel::Linear => zu.clone(),
        }
    }

    fn residual(&self, q: &DenseMatrix) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
        let (zu, zg) = self.pre(q);
        let mut r = self.output(&zu, &zg);
        for (v, y) in r.as_mut_slice().iter_mut().zip(self.y_r.as_slice()) {
            *v -= y;
        }
        (r, zu, zg)
    }

    fn value(&self, q: &DenseMatrix) -> f64 {
        let (r, _, _) = self.residual(q);
        r.mul(self.metric).as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum()
    }

    fn gradient(&self, q: &DenseMatrix) -> DenseMatrix {
        let (r, zu, zg) = self.residual(q);
        let df = r.mul(self.metric).scale(2.0);
        match self.model {
            SliceModel::Linear => self.xu.t_mul(&df),
            SliceModel::Gated => {
                let mut du = df.clone();
                let mut dg = df;
                for (((a, b), u), g) in du
                    .as_mut_slice()
                    .iter_mut()
                    .zip(dg.as_mut_slice().iter_mut())
                    .zip(zu.as_slice())
                    .zip(zg.as_slice())
                {
                    *a *= silu(*g);
                    *b *= u * crate::tmodel::silu_grad(*g);
                }
                let mut grad = self.xu.t_mul(&du);
                grad.add_assign(&self.xg.t_mul(&dg));
                grad
            }
        }
    }
}

fn clamp(q: &DenseMatrix, bound: f64) -> DenseMatrix {
    q.map(|v| v.clamp(-bound, bound))
}

/// Refine every slice of `qc` once, holding the others fixed. Each slice
/// takes up to `steps` projected gradient steps with backtracking; a step is
/// accepted only if it lowers the slice objective. Returns the new `qc` and
/// the slice objective after each slice.
pub fn slice_optimize_qc(
    state: &mut SliceState,
    rows: &FfnRows,
    qc: &DenseMatrix,
    steps: usize,
    amplitude: f64,
    model: SliceModel,
) -> Result<(DenseMatrix, Vec<f64>)> {
    let n = qc.rows();
    let mut qc = qc.clone();
    let mut trace = Vec::new();
    for (s, e) in state.slices(n) {
        let idx: Vec<usize> = (s..e).collect();
        let xu = rows.up.select_columns(&idx);
        let xg = rows.gate.select_columns(&idx);
        let q0 = qc.row_block(s, e - s);
        let cu = state.c_u.sub(&xu.mul(&q0))?;
        let cg = state.c_g.sub(&xg.mul(&q0))?;
        let prob = SliceProblem { xu, xg, cu, cg, y_r: &state.y_r, metric: &state.metric, model };
        let mut q = q0.clone();
        let mut f = prob.value(&q);
        if !f.is_finite() {
            log::warn!("slice {s}..{e}: non-finite objective, slice left unchanged");
            trace.push(f);
            continue;
        }
        // Initial step from a crude curvature bound; later steps reuse the
        // last accepted length, doubled.
        let curv = (prob.xu.frobenius_norm_sq() + prob.xg.frobenius_norm_sq()) * state.metric.frobenius_norm().max(1e-300);
        let mut t = 1.0 / curv.max(1e-300);
        for _ in 0..steps {
            let g = prob.gradient(&q);
            if !g.is_finite() || g.max_abs() == 0.0 {
                break;
            }
            let mut accepted = false;
            for _ in 0..40 {
                let cand = clamp(&q.sub(&g.scale(t))?, amplitude);
                let fc = prob.value(&cand);
                if fc.is_finite() && fc < f {
                    q = cand;
                    f = fc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
            t *= 2.0;
        }
        if !q.is_finite() {
            trace.push(f64::NAN);
            continue;
        }
        let (zu, zg) = prob.pre(&q);
        state.c_u = zu;
        state.c_g = zg;
        qc.set_submatrix(s, 0, &q);
        trace.push(f);
    }
    Ok((qc, trace))
}

/// One entry of the optimisation log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveRecord {
    pub sweep: usize,
    pub stage: String,
    pub slice: Option<usize>,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnCompression {
    pub transforms: FfnTransforms,
    pub log: Vec<ObjectiveRecord>,
    /// Ridge λ fixed at initialisation.
    pub lambda: f64,
    pub iterated: bool,
}

/// Write the log as JSON lines.
pub fn write_log(log: &[ObjectiveRecord], mut out: impl Write) -> Result<()> {
    for r in log {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Initial selection plus ridge `qr`; then, when the schedule is enabled,
/// alternating slice sweeps and `qr` re-solves. Returns the lowest-objective
/// pair seen. `P = D_inter` returns the identity.
pub fn iterate_pca(
    x_d: &GramAccumulator,
    rows: Option<&FfnRows>,
    w_d: &DenseMatrix,
    p: usize,
    schedule: &Schedule,
    ridge: Ridge,
) -> Result<FfnCompression> {
    let n = x_d.dim;
    if p == n {
        return Ok(FfnCompression { transforms: FfnTransforms::identity(n), log: vec![], lambda: 0.0, iterated: false });
    }
    let (qc, selected) = init_qc_select(x_d, w_d, p)?;
    let lambda = ridge.resolve(&x_d.gram.select_rows(&selected).select_columns(&selected));
    let qr = solve_qr_selected(x_d, &selected, Ridge::Value(lambda))?;
    let init = FfnTransforms { qc, qr, selected };
    let mut log = Vec::new();
    let rows = match (schedule.enabled, rows) {
        (false, _) => return Ok(FfnCompression { transforms: init, log, lambda, iterated: false }),
        (true, None) => return Err(Error::Config("FFN iteration needs calibration rows".into())),
        (true, Some(r)) => r,
    };
    let fixed = Ridge::Value(lambda);
    let mut qc = init.qc.clone();
    let mut qr = init.qr.clone();
    let mut best = (objective(rows, &qc, &qr, lambda)?, qc.clone(), qr.clone());
    log.push(ObjectiveRecord { sweep: 0, stage: "init".into(), slice: None, objective: best.0 });
    for sweep in 1..=schedule.sweeps {
        let mut state = SliceState::new(rows, &qc, &qr, schedule.slice_width)?;
        let (new_qc, per_slice) =
            slice_optimize_qc(&mut state, rows, &qc, schedule.steps_per_slice, schedule.amplitude, schedule.model)?;
        qc = new_qc;
        let after = objective(rows, &qc, &qr, lambda)?;
        for (k, v) in per_slice.into_iter().enumerate() {
            log.push(ObjectiveRecord { sweep, stage: "slice".into(), slice: Some(k), objective: v });
        }
        log.push(ObjectiveRecord { sweep, stage: "slices_done".into(), slice: None, objective: after });
        match solve_qr(rows, &qc, fixed) {
            Ok(q) => qr = q,
            Err(e) if !e.is_numerical() => return Err(e),
            Err(e) => {
                log::warn!("sweep {sweep}: qr re-solve failed ({e}); keeping the previous qr");
            }
        }
        let j = objective(rows, &qc, &qr, lambda)?;
        log.push(ObjectiveRecord { sweep, stage: "qr".into(), slice: None, objective: j });
        if !j.is_finite() {
            break;
        }
        if j < best.0 {
            best = (j, qc.clone(), qr.clone());
        }
    }
    let (_, qc, qr) = best;
    Ok(FfnCompression { transforms: FfnTransforms { qc, qr, selected: init.selected }, log, lambda, iterated: true })
}

/// Compress one dense FFN layer from its trace.
pub fn compress_ffn(
    ckpt: &Checkpoint,
    layer: usize,
    trace: &LayerTrace,
    p: usize,
    schedule: &Schedule,
    ridge: Ridge,
) -> Result<FfnCompression> {
    let rows = schedule.enabled.then(|| FfnRows::from_trace(trace));
    iterate_pca(&trace.down_input.gram, rows.as_ref(), ckpt.layer_tensor(layer, "wd")?, p, schedule, ridge)
}

/// `W_u qc`, `W_g qc`, `qr W_d`.
pub fn fuse_ffn(ckpt: &mut Checkpoint, layer: usize, t: &FfnTransforms) -> Result<()> {
    let inter = ckpt.config.inter;
    if ckpt.layout[layer].ffn_dim != inter {
        return Err(Error::dims("fuse_ffn", format!("layer {layer} FFN is already compressed")));
    }
    let p = t.width();
    if t.qc.rows() != inter || t.qr.shape() != (p, inter) {
        return Err(Error::dims("fuse_ffn", format!("qc {:?}, qr {:?}", t.qc.shape(), t.qr.shape())));
    }
    let wu = ckpt.layer_tensor(layer, "wu")?.matmul(&t.qc)?;
    let wg = ckpt.layer_tensor(layer, "wg")?.matmul(&t.qc)?;
    let wd = t.qr.matmul(ckpt.layer_tensor(layer, "wd")?)?;
    ckpt.set_layer_tensor(layer, "wu", wu);
    ckpt.set_layer_tensor(layer, "wg", wg);
    ckpt.set_layer_tensor(layer, "wd", wd);
    ckpt.layout[layer].ffn_dim = p;
    Ok(())
}

/// FFN parameters at width `p`.
pub fn ffn_params(hidden: usize, p: usize) -> usize {
    3 * hidden * p
}
