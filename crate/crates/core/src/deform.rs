//! Deformation stage: controlling-point fusion, the k-NN Laplacian graph,
//! multi-radius local features against the input cloud, and the residual
//! GCN that predicts per-point offsets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gen_net::NetError;
use crate::geometry::{ball_group, fps, knn, FpsSeed, LaplacianGraph, PointCloud};
use crate::nn::{broadcast_rows, BatchNorm, Ctx, Linear};
use crate::tensor::{ParamStore, Tensor, TensorError, Var};

/// Radius multipliers of the three grouping scales.
pub const RADIUS_SCALES: [f64; 3] = [1.0, 2.0, 4.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformConfig {
    /// Neighbors per point in the Laplacian graph.
    pub k: usize,
    /// Base ball radius as a fraction of the input's bounding-box diagonal.
    pub radius_scale: f64,
    pub group_size: usize,
    /// Widths of the per-radius point MLP.
    pub feature_widths: Vec<usize>,
    pub gcn_layers: usize,
    pub hidden: usize,
    /// Multiplier on the head output before it is added to the points.
    pub offset_scale: f64,
    pub fps_seed: FpsSeed,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            k: 8,
            radius_scale: 0.05,
            group_size: 16,
            feature_widths: vec![16, 32],
            gcn_layers: 6,
            hidden: 128,
            offset_scale: 0.1,
            fps_seed: FpsSeed::Lexicographic,
        }
    }
}

impl DeformConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let fail = |m: String| Err(NetError::Config(m));
        if self.k == 0 || self.group_size == 0 || self.hidden == 0 {
            return fail("k, group_size and hidden must be at least 1".into());
        }
        if !(self.radius_scale > 0.0 && self.radius_scale.is_finite()) {
            return fail(format!("radius_scale must be positive, got {}", self.radius_scale));
        }
        if self.feature_widths.is_empty() || self.feature_widths.contains(&0) {
            return fail("feature_widths must be a non-empty list of positive widths".into());
        }
        if !(self.offset_scale > 0.0 && self.offset_scale.is_finite()) {
            return fail(format!("offset_scale must be positive, got {}", self.offset_scale));
        }
        if self.gcn_layers == 0 || !self.gcn_layers.is_multiple_of(2) {
            return fail(format!("gcn_layers must be a positive even number, got {}", self.gcn_layers));
        }
        Ok(())
    }

    /// Width of the concatenated three-radius feature.
    pub fn feature_width(&self) -> usize {
        RADIUS_SCALES.len() * self.feature_widths.last().copied().unwrap_or(0)
    }
}

/// The fused cloud `P_g = P_c ++ P_s` with its graph and control labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformGraph {
    pub merged: PointCloud,
    pub graph: LaplacianGraph,
    /// 1 for controlling points, 0 for supporting points.
    pub labels: Vec<f64>,
    pub control_count: usize,
    /// Indices of the controlling points in the input cloud.
    pub control_indices: Vec<usize>,
}

impl DeformGraph {
    pub fn controls(&self) -> PointCloud {
        let idx: Vec<usize> = (0..self.control_count).collect();
        self.merged.select(&idx).expect("controls lead the merged cloud")
    }
}

/// FPS picks `n_c` controlling points from `input`; they precede `p_s` in
/// the merged cloud, on which the k-NN graph is built.
pub fn build_graph(
    input: &PointCloud,
    p_s: &PointCloud,
    n_c: usize,
    k: usize,
    seed: FpsSeed,
) -> Result<DeformGraph, NetError> {
    if n_c == 0 || n_c > input.len() {
        return Err(NetError::Config(format!(
            "control count {n_c} must lie in 1..={}",
            input.len()
        )));
    }
    if k >= n_c + p_s.len() {
        return Err(NetError::Config(format!(
            "k = {k} needs more than {k} merged points, got {}",
            n_c + p_s.len()
        )));
    }
    let control_indices = fps(input, n_c, seed.resolve(input))?;
    let merged = input.select(&control_indices)?.concat(p_s);
    let graph = knn(&merged, k)?;
    let mut labels = vec![0.0; merged.len()];
    labels[..n_c].fill(1.0);
    Ok(DeformGraph {
        merged,
        graph,
        labels,
        control_count: n_c,
        control_indices,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    /// Per radius: linear (no bias) followed by batch norm and ReLU.
    pub branches: Vec<Vec<(Linear, BatchNorm)>>,
    pub group_size: usize,
    pub radius_scale: f64,
}

impl FeatureExtractor {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &DeformConfig, rng: &mut R) -> Self {
        let branches = (0..RADIUS_SCALES.len())
            .map(|r| {
                let mut inputs = 3;
                config
                    .feature_widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let name = format!("features.r{r}.{i}");
                        let lin = Linear::new(store, &name, inputs, w, false, rng);
                        let bn = BatchNorm::new(store, &format!("{name}.bn"), w);
                        inputs = w;
                        (lin, bn)
                    })
                    .collect()
            })
            .collect();
        Self {
            branches,
            group_size: config.group_size,
            radius_scale: config.radius_scale,
        }
    }

    pub fn width(&self) -> usize {
        self.branches.iter().map(|b| b.last().unwrap().0.outputs).sum()
    }

    /// Base radius for an input cloud.
    pub fn radius_for(&self, input: &PointCloud) -> f64 {
        let r = self.radius_scale * input.bbox_diagonal();
        if r > 0.0 {
            r
        } else {
            self.radius_scale
        }
    }

    /// Per-point features `F(p_i; P)` of shape `(|merged|, width)`.
    ///
    /// For radius `ρ ∈ {r, 2r, 4r}` each merged point groups input points
    /// within `ρ`, runs the point MLP on `neighbor − center`, and max-pools
    /// over the group. `merged` carries the differentiable coordinates of
    /// `merged_cloud`.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        merged: Var<'t>,
        merged_cloud: &PointCloud,
        input: &PointCloud,
        r: f64,
    ) -> Result<Var<'t>, NetError> {
        if !(r > 0.0) {
            return Err(NetError::Config(format!("radius must be positive, got {r}")));
        }
        let n = merged_cloud.len();
        let m = self.group_size;
        let source = ctx.tape.constant(input.to_tensor());
        let centers_idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, m)).collect();
        let centers = merged.gather(&centers_idx)?;
        let mut feats = Vec::with_capacity(self.branches.len());
        for (branch, scale) in self.branches.iter().zip(RADIUS_SCALES) {
            let groups = ball_group(merged_cloud, input, scale * r, m)?;
            let flat: Vec<usize> = groups.into_iter().flatten().collect();
            let mut h = source.gather(&flat)?.sub(centers)?;
            for (lin, bn) in branch {
                h = bn.forward(ctx, lin.forward(ctx, h)?)?.relu();
            }
            let w = h.shape()[1];
            feats.push(h.reshape(&[n, m, w])?.reduce_max(1)?.reshape(&[n, w])?);
        }
        Ok(Var::concat(&feats, 1)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GcnLayer {
    pub self_weight: Linear,
    pub neighbor_weight: Linear,
}

impl GcnLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            self_weight: Linear::new(store, &format!("{name}.w0"), inputs, outputs, true, rng),
            neighbor_weight: Linear::new(store, &format!("{name}.w1"), inputs, outputs, false, rng),
        }
    }

    /// `relu(W0·h_i + W1·(Σ_{j∈A(i)} h_j / k))`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, h: Var<'t>, graph: &LaplacianGraph) -> Result<Var<'t>, TensorError> {
        let (n, k) = (graph.len(), graph.k());
        let width = h.shape()[1];
        let mean = h.gather(graph.flat())?.reshape(&[n, k, width])?.reduce_mean(1)?.reshape(&[n, width])?;
        let own = self.self_weight.forward(ctx, h)?;
        Ok(own.add(self.neighbor_weight.forward(ctx, mean)?)?.relu())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnParams {
    pub input: Linear,
    pub layers: Vec<GcnLayer>,
    /// Zero-initialized, so deformation starts from the identity.
    pub head: Linear,
    pub offset_scale: f64,
}

impl GcnParams {
    /// `input_width` is the per-point input width: features, code,
    /// coordinates and label.
    pub fn new<R: Rng>(store: &mut ParamStore, config: &DeformConfig, input_width: usize, rng: &mut R) -> Self {
        let hidden = config.hidden;
        Self {
            input: Linear::new(store, "gcn.input", input_width, hidden, true, rng),
            layers: (0..config.gcn_layers)
                .map(|i| GcnLayer::new(store, &format!("gcn.layer{i}"), hidden, hidden, rng))
                .collect(),
            head: Linear::zeros(store, "gcn.head", hidden, 3),
            offset_scale: config.offset_scale,
        }
    }

    /// Refines the merged cloud: each point's input row is
    /// `concat(F_i, code, p_i, l_i)`; GCN layers run in residual pairs and
    /// the scaled head output is added to `p_i`. Returns `(P_o, offsets)`.
    pub fn deform<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        graph: &DeformGraph,
        merged: Var<'t>,
        features: Var<'t>,
        code: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>), NetError> {
        let n = graph.merged.len();
        let fdim = code.value().numel();
        let code_rows = broadcast_rows(code.reshape(&[1, fdim])?, n)?;
        let labels = ctx.tape.constant(Tensor::new(vec![n, 1], graph.labels.clone())?);
        let x = Var::concat(&[features, code_rows, merged, labels], 1)?;
        if x.shape()[1] != self.input.inputs {
            return Err(NetError::Config(format!(
                "GCN input width {} does not match {}",
                x.shape()[1],
                self.input.inputs
            )));
        }
        let mut h = self.input.forward(ctx, x)?.relu();
        for pair in self.layers.chunks(2) {
            let skip = h;
            for layer in pair {
                h = layer.forward(ctx, h, &graph.graph)?;
            }
            h = h.add(skip)?;
        }
        let offsets = self.head.forward(ctx, h)?.scale(self.offset_scale);
        Ok((merged.add(offsets)?, offsets))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| [0; 3].map(|_| rng.gen_range(-0.5..0.5))).collect()).unwrap()
    }

    fn small_config() -> DeformConfig {
        DeformConfig {
            k: 4,
            group_size: 4,
            feature_widths: vec![4, 5],
            gcn_layers: 2,
            hidden: 6,
            ..DeformConfig::default()
        }
    }

    #[test]
    fn square_plus_center_controls_are_the_corners() {
        let square = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.5, 0.5, 0.0],
        ])
        .unwrap();
        let p_s = random_cloud(6, 1);
        let g = build_graph(&square, &p_s, 4, 3, FpsSeed::Index(0)).unwrap();
        let mut idx = g.control_indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert_eq!(g.merged.points()[4..], p_s.points()[..]);
    }

    #[test]
    fn labels_mark_leading_controls() {
        let g = build_graph(&random_cloud(5, 2), &random_cloud(3, 3), 2, 2, FpsSeed::Lexicographic).unwrap();
        assert_eq!(g.labels, vec![1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.controls().len(), 2);
    }

    #[test]
    fn merged_size_is_controls_plus_supporting() {
        let g = build_graph(&random_cloud(512, 4), &random_cloud(1792, 5), 256, 8, FpsSeed::Lexicographic).unwrap();
        assert_eq!(g.merged.len(), 2048);
        assert_eq!(g.graph.len(), 2048);
    }

    #[test]
    fn size_violations_rejected() {
        let p = random_cloud(4, 6);
        assert!(build_graph(&p, &random_cloud(3, 7), 5, 2, FpsSeed::Lexicographic).is_err());
        assert!(build_graph(&p, &random_cloud(1, 7), 2, 3, FpsSeed::Lexicographic).is_err());
    }

    fn features(config: &DeformConfig) -> (ParamStore, FeatureExtractor) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fx = FeatureExtractor::new(&mut store, config, &mut rng);
        (store, fx)
    }

    fn run_features(store: &ParamStore, fx: &FeatureExtractor, merged: &PointCloud, input: &PointCloud, r: f64, train: bool) -> Tensor {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, train);
        let v = fx.forward(&ctx, tape.constant(merged.to_tensor()), merged, input, r).unwrap();
        (*v.value()).clone()
    }

    #[test]
    fn feature_width_is_three_radii() {
        let config = small_config();
        let (store, fx) = features(&config);
        assert_eq!(fx.width(), 15);
        assert_eq!(config.feature_width(), 15);
        let out = run_features(&store, &fx, &random_cloud(10, 1), &random_cloud(20, 2), 0.2, true);
        assert_eq!(out.shape(), &[10, 15]);
    }

    #[test]
    fn isolated_coincident_point_sees_only_the_zero_input() {
        let config = small_config();
        let (store, fx) = features(&config);
        let input = PointCloud::new(vec![[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]]).unwrap();
        let merged = PointCloud::new(vec![[0.0, 0.0, 0.0], [5.0, 5.0, 5.0]]).unwrap();
        let out = run_features(&store, &fx, &merged, &input, 0.1, false);
        // Oracle: the eval-mode branch applied to one zero row.
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let mut expect = Vec::new();
        for branch in &fx.branches {
            let mut h = tape.constant(Tensor::zeros(&[1, 3]));
            for (lin, bn) in branch {
                h = bn.forward(&ctx, lin.forward(&ctx, h).unwrap()).unwrap().relu();
            }
            expect.extend_from_slice(h.value().data());
        }
        assert_eq!(&out.data()[..15], &expect[..]);
    }

    #[test]
    fn joint_translation_leaves_features_unchanged() {
        let config = small_config();
        let (store, fx) = features(&config);
        let input = random_cloud(40, 9);
        let merged = random_cloud(12, 10);
        let t = [0.25, -1.5, 3.0];
        for train in [true, false] {
            let a = run_features(&store, &fx, &merged, &input, 0.15, train);
            let b = run_features(&store, &fx, &merged.translated(t), &input.translated(t), 0.15, train);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
            }
        }
    }

    fn gcn_setup(config: &DeformConfig, width: usize) -> (ParamStore, GcnParams, DeformGraph) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let gcn = GcnParams::new(&mut store, config, width, &mut rng);
        let g = build_graph(&random_cloud(20, 13), &random_cloud(24, 14), 8, config.k, FpsSeed::Lexicographic).unwrap();
        (store, gcn, g)
    }

    #[test]
    fn zero_head_is_identity() {
        let config = small_config();
        let (store, gcn, g) = gcn_setup(&config, 5 + 7 + 3 + 1);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let merged = tape.constant(g.merged.to_tensor());
        let f = tape.constant(Tensor::full(&[32, 5], 0.7));
        let code = tape.constant(Tensor::full(&[1, 7, 1], -0.3));
        let (p_o, _) = gcn.deform(&ctx, &g, merged, f, code).unwrap();
        assert_eq!(p_o.value().data(), g.merged.to_tensor().data());
    }

    #[test]
    fn zero_neighbor_weight_is_pointwise() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let layer = GcnLayer::new(&mut store, "l", 3, 4, &mut rng);
        store.set(layer.neighbor_weight.weight, Tensor::zeros(&[3, 4]));
        let cloud = random_cloud(10, 16);
        let graph = knn(&cloud, 3).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let h = tape.constant(cloud.to_tensor());
        let out = layer.forward(&ctx, h, &graph).unwrap();
        let expect = layer.self_weight.forward(&ctx, h).unwrap().relu();
        assert_eq!(out.value().data(), expect.value().data());
    }

    #[test]
    fn uniform_neighbors_give_w1_times_constant() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let layer = GcnLayer::new(&mut store, "l", 2, 3, &mut rng);
        store.set(layer.self_weight.weight, Tensor::zeros(&[2, 3]));
        // Neighbor term is W1·c for every k; push it positive so the ReLU
        // passes it through unchanged.
        store.set(layer.self_weight.bias.unwrap(), Tensor::full(&[3], 100.0));
        let c = [0.4, -1.1];
        let w1 = store.get(layer.neighbor_weight.weight).clone();
        let expect: Vec<f64> = (0..3).map(|o| 100.0 + c[0] * w1.data()[o] + c[1] * w1.data()[3 + o]).collect();
        for k in [1, 3, 5] {
            let cloud = random_cloud(8, 18);
            let graph = knn(&cloud, k).unwrap();
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, false);
            let h = tape.constant(Tensor::new(vec![8, 2], c.repeat(8)).unwrap());
            let out = layer.forward(&ctx, h, &graph).unwrap().value();
            for row in out.data().chunks(3) {
                for (v, e) in row.iter().zip(&expect) {
                    assert!((v - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn odd_layer_count_rejected() {
        let config = DeformConfig {
            gcn_layers: 3,
            ..DeformConfig::default()
        };
        assert!(config.validate().is_err());
        assert!(DeformConfig::default().validate().is_ok());
    }

    #[test]
    fn gradient_through_features_and_gcn_matches_finite_differences() {
        let config = small_config();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let fx = FeatureExtractor::new(&mut store, &config, &mut rng);
        let width = fx.width() + 4 + 3 + 1;
        let mut gcn = GcnParams::new(&mut store, &config, width, &mut rng);
        gcn.head = Linear::new(&mut store, "head", config.hidden, 3, true, &mut rng);
        let input = random_cloud(32, 20);
        let g = build_graph(&input, &random_cloud(24, 21), 8, 4, FpsSeed::Lexicographic).unwrap();
        let target = random_cloud(32, 22).to_tensor();
        let code = Tensor::full(&[1, 4, 1], 0.2);
        let r = fx.radius_for(&input);
        let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        let params: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
        let err = finite_diff_check(
            |tape, vars| {
                let ctx = Ctx::with_bindings(tape, &store, true, &ids, vars);
                let merged = tape.constant(g.merged.to_tensor());
                let f = fx.forward(&ctx, merged, &g.merged, &input, r).unwrap();
                let (p_o, _) = gcn.deform(&ctx, &g, merged, f, tape.constant(code.clone())).unwrap();
                Ok(crate::geometry::chamfer(p_o, tape.constant(target.clone())).unwrap())
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-3, "{err}");
    }
}
