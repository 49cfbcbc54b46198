//! Finite-difference checks over every loss and network block.

use std::fmt;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::deform::{build_graph, DeformConfig, FeatureExtractor, GcnParams};
use crate::gen_net::{DecoderParams, EncoderParams, GenNetConfig};
use crate::geometry::{chamfer, knn, FpsSeed, PointCloud};
use crate::losses::{matching_loss, shape_preserving_loss, ShapeLossForm};
use crate::nn::Ctx;
use crate::seed::{stream_rng, streams};
use crate::tensor::{finite_diff_check, ParamId, ParamStore, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub points: usize,
    pub k: usize,
    pub step: f64,
    /// A block passes when its worst relative error is strictly below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            points: 32,
            k: 4,
            step: 1e-5,
            tolerance: 1e-3,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockResult {
    pub block: &'static str,
    pub parameters: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockResult>,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            writeln!(
                f,
                "{} {:<18} params {:>6}  max rel err {:.3e}",
                if b.passed { "PASS" } else { "FAIL" },
                b.block,
                b.parameters,
                b.max_rel_error
            )?;
        }
        write!(f, "tolerance {:e}, {:.2?}", self.tolerance, self.elapsed)
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape matches")
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| [0; 3].map(|_| rng.gen_range(-0.5..0.5))).collect()).expect("non-empty")
}

fn block_net() -> (GenNetConfig, DeformConfig) {
    let gen = GenNetConfig {
        depth: 2,
        c0: 8,
        d_mid: 16,
        feature_dim: 16,
        ..GenNetConfig::default()
    };
    let deform = DeformConfig {
        k: 4,
        group_size: 4,
        feature_widths: vec![8],
        gcn_layers: 2,
        hidden: 16,
        ..DeformConfig::default()
    };
    (gen, deform)
}

/// Trainable parameters of `store` as `(ids, values)`.
fn trainable(store: &ParamStore) -> (Vec<ParamId>, Vec<Tensor>) {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let values = ids.iter().map(|&id| store.get(id).clone()).collect();
    (ids, values)
}

/// Fixed random projection of `v` to a scalar.
fn project<'t>(v: Var<'t>, weights: &Tensor) -> Result<Var<'t>, TensorError> {
    v.mul(v.tape().constant(weights.clone()))?.sum_all()
}

/// Runs every block. Each block draws its inputs from its own seed stream.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport, TensorError> {
    let start = Instant::now();
    let (n, k, h) = (config.points, config.k, config.step);
    let rng_for = |block: u64| stream_rng(config.seed, streams::GRADCHECK, block);
    let mut blocks = Vec::new();
    let mut push = |block: &'static str, params: &[Tensor], err: f64| {
        blocks.push(BlockResult {
            block,
            parameters: params.iter().map(Tensor::numel).sum(),
            max_rel_error: err,
            passed: err < config.tolerance,
        });
    };
    let geo = |e: crate::geometry::GeometryError| TensorError::ShapeMismatch {
        op: "gradcheck",
        detail: e.to_string(),
    };
    let net = |e: crate::gen_net::NetError| TensorError::ShapeMismatch {
        op: "gradcheck",
        detail: e.to_string(),
    };

    {
        let mut rng = rng_for(0);
        let params = [random_cloud(&mut rng, n).to_tensor(), random_cloud(&mut rng, n + 5).to_tensor()];
        let err = finite_diff_check(|_, v| chamfer(v[0], v[1]).map_err(geo), &params, h)?;
        push("chamfer", &params, err);
    }
    {
        let mut rng = rng_for(1);
        let before = random_cloud(&mut rng, n).to_tensor();
        let mut after = before.clone();
        for v in after.data_mut() {
            *v += rng.gen_range(-0.6..0.6);
        }
        let params = [after];
        let err = finite_diff_check(|t, v| matching_loss(t.constant(before.clone()), v[0]).map_err(geo), &params, h)?;
        push("matching", &params, err);
    }
    for (index, (name, form)) in [
        ("shape_per_vertex", ShapeLossForm::PerVertex),
        ("shape_global", ShapeLossForm::Global),
        ("shape_change", ShapeLossForm::Change),
    ]
    .into_iter()
    .enumerate()
    {
        let mut rng = rng_for(2 + index as u64);
        let before = random_cloud(&mut rng, n);
        let graph = knn(&before, k).map_err(geo)?;
        let mut after = before.to_tensor();
        for v in after.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        let before = before.to_tensor();
        let params = [after];
        let err = finite_diff_check(
            |t, v| shape_preserving_loss(t.constant(before.clone()), v[0], &graph, form).map_err(geo),
            &params,
            h,
        )?;
        push(name, &params, err);
    }

    let (gen, deform) = block_net();
    {
        let mut rng = rng_for(5);
        let mut store = ParamStore::new();
        let enc = EncoderParams::new(&mut store, &gen, &mut rng);
        let input = random_cloud(&mut rng, n);
        let w = random_tensor(&mut rng, &[1, gen.feature_dim, 1], 1.0);
        let (ids, params) = trainable(&store);
        let err = finite_diff_check(
            |t, v| {
                let ctx = Ctx::with_bindings(t, &store, false, &ids, v);
                project(enc.encode(&ctx, &input).map_err(net)?, &w)
            },
            &params,
            h,
        )?;
        push("encoder", &params, err);
    }
    {
        let mut rng = rng_for(6);
        let mut store = ParamStore::new();
        let n_s = 64;
        let dec = DecoderParams::new(&mut store, &gen, n_s, &mut rng);
        let code = random_tensor(&mut rng, &[1, gen.feature_dim, 1], 1.0);
        let target = random_cloud(&mut rng, n).to_tensor();
        let (ids, params) = trainable(&store);
        let err = finite_diff_check(
            |t, v| {
                let ctx = Ctx::with_bindings(t, &store, false, &ids, v);
                let out = dec.decode(&ctx, t.constant(code.clone())).map_err(net)?;
                chamfer(out, t.constant(target.clone())).map_err(geo)
            },
            &params,
            h,
        )?;
        push("decoder", &params, err);
    }

    // The deformation blocks share one merged cloud of n points.
    let mut rng = rng_for(7);
    let input = random_cloud(&mut rng, n);
    let n_c = n / 4;
    let p_s = random_cloud(&mut rng, n - n_c);
    let graph = build_graph(&input, &p_s, n_c, k, FpsSeed::Lexicographic).map_err(net)?;
    {
        let mut store = ParamStore::new();
        let fx = FeatureExtractor::new(&mut store, &deform, &mut rng);
        let r = fx.radius_for(&input);
        let w = random_tensor(&mut rng, &[n, fx.width()], 1.0);
        let merged = graph.merged.to_tensor();
        let (ids, params) = trainable(&store);
        let err = finite_diff_check(
            |t, v| {
                let ctx = Ctx::with_bindings(t, &store, true, &ids, v);
                let f = fx
                    .forward(&ctx, t.constant(merged.clone()), &graph.merged, &input, r)
                    .map_err(net)?;
                project(f, &w)
            },
            &params,
            h,
        )?;
        push("feature_extractor", &params, err);
    }
    {
        let mut store = ParamStore::new();
        let feature_width = 8;
        let width = feature_width + gen.feature_dim + 3 + 1;
        let gcn = GcnParams::new(&mut store, &deform, width, &mut rng);
        // A zero head would leave every hidden layer without gradient.
        let head = random_tensor(&mut rng, store.get(gcn.head.weight).shape(), 0.5);
        store.set(gcn.head.weight, head);
        let features = random_tensor(&mut rng, &[n, feature_width], 1.0);
        let code = random_tensor(&mut rng, &[1, gen.feature_dim, 1], 1.0);
        let target = random_cloud(&mut rng, n + 3).to_tensor();
        let merged = graph.merged.to_tensor();
        let (ids, params) = trainable(&store);
        let err = finite_diff_check(
            |t, v| {
                let ctx = Ctx::with_bindings(t, &store, true, &ids, v);
                let (p_o, _) = gcn
                    .deform(
                        &ctx,
                        &graph,
                        t.constant(merged.clone()),
                        t.constant(features.clone()),
                        t.constant(code.clone()),
                    )
                    .map_err(net)?;
                chamfer(p_o, t.constant(target.clone())).map_err(geo)
            },
            &params,
            h,
        )?;
        push("gcn", &params, err);
    }
    Ok(GradcheckReport {
        blocks,
        tolerance: config.tolerance,
        elapsed: start.elapsed(),
    })
}
