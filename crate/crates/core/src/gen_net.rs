//! Generation network: a multi-resolution point encoder producing a global
//! shape code, and an eightfold tree decoder expanding the code into the
//! intermediate cloud.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{fps, FpsSeed, GeometryError, PointCloud};
use crate::nn::{broadcast_rows, Ctx, Linear, Mlp, Pooling};
use crate::tensor::{ParamStore, TensorError, Var};

pub const TREE_ARITY: usize = 8;
pub const MIN_ENCODER_POINTS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("encoder needs at least {MIN_ENCODER_POINTS} points, got {0}")]
    TooFewPoints(usize),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenNetConfig {
    /// Tree depth L; the decoder has 8^L leaves.
    pub depth: usize,
    pub c0: usize,
    pub d_mid: usize,
    pub feature_dim: usize,
    pub pooling: Pooling,
    pub fps_seed: FpsSeed,
}

impl Default for GenNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            c0: 64,
            d_mid: 128,
            feature_dim: 256,
            pooling: Pooling::Max,
            fps_seed: FpsSeed::Lexicographic,
        }
    }
}

impl GenNetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.depth == 0 || self.c0 == 0 || self.d_mid == 0 || self.feature_dim == 0 {
            return Err(NetError::Config(
                "depth, c0, d_mid and feature_dim must all be at least 1".into(),
            ));
        }
        if self.depth > 6 {
            return Err(NetError::Config(format!("tree depth {} is too large", self.depth)));
        }
        Ok(())
    }

    pub fn leaves(&self) -> usize {
        TREE_ARITY.pow(self.depth as u32)
    }

    /// Points emitted per leaf so that the tree covers `n_s` points.
    pub fn patch_size(&self, n_s: usize) -> usize {
        n_s.div_ceil(self.leaves()).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub h0: Mlp,
    pub h1: Mlp,
    pub fuse: Mlp,
    pub feature_dim: usize,
    pub pooling: Pooling,
    pub fps_seed: FpsSeed,
}

impl EncoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &GenNetConfig, rng: &mut R) -> Self {
        let d = config.d_mid;
        Self {
            h0: Mlp::new(store, "encoder.h0", &[3, 64, d], rng),
            h1: Mlp::new(store, "encoder.h1", &[2 * d, d, d], rng),
            fuse: Mlp::new(store, "encoder.fuse", &[6 * d, config.feature_dim, config.feature_dim], rng),
            feature_dim: config.feature_dim,
            pooling: config.pooling,
            fps_seed: config.fps_seed,
        }
    }

    /// Shape code of shape `(1, feature_dim, 1)`.
    ///
    /// FPS picks subsets of sizes N, N/2 and N/8. For each subset P_i the
    /// feature is `concat(g(h0(P)), g(h1(h0(P_i) ++ g(h0(P_i)))))`, where `g` is
    /// the global pool and `++` appends the pooled row to every point.
    pub fn encode<'t>(&self, ctx: &Ctx<'t, '_>, cloud: &PointCloud) -> Result<Var<'t>, NetError> {
        let n = cloud.len();
        if n < MIN_ENCODER_POINTS {
            return Err(NetError::TooFewPoints(n));
        }
        let x = ctx.tape.constant(cloud.to_tensor());
        let h0 = self.h0.forward(ctx, x)?;
        let global = self.pooling.apply(h0)?;
        let seed = self.fps_seed.resolve(cloud);
        let order = fps(cloud, n, seed)?;
        let mut parts = Vec::with_capacity(6);
        for m in [n, n / 2, n / 8] {
            let local = h0.gather(&order[..m])?;
            let pooled = broadcast_rows(self.pooling.apply(local)?, m)?;
            let h1 = self.h1.forward(ctx, Var::concat(&[local, pooled], 1)?)?;
            parts.push(global);
            parts.push(self.pooling.apply(h1)?);
        }
        let code = self.fuse.forward(ctx, Var::concat(&parts, 1)?)?;
        Ok(code.reshape(&[1, self.feature_dim, 1])?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub root: Mlp,
    pub levels: Vec<Linear>,
    pub leaf: Linear,
    pub c0: usize,
    pub feature_dim: usize,
    pub patch: usize,
    pub output_points: usize,
}

impl DecoderParams {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &GenNetConfig, n_s: usize, rng: &mut R) -> Self {
        let (c0, f) = (config.c0, config.feature_dim);
        let patch = config.patch_size(n_s);
        let levels = (1..config.depth)
            .map(|l| Linear::new(store, &format!("decoder.level{l}"), c0 + f, TREE_ARITY * c0, true, rng))
            .collect();
        Self {
            root: Mlp::new(store, "decoder.root", &[f, f, TREE_ARITY * c0], rng),
            levels,
            leaf: Linear::new(store, "decoder.leaf", c0 + f, 3 * patch, true, rng),
            c0,
            feature_dim: f,
            patch,
            output_points: n_s,
        }
    }

    pub fn depth(&self) -> usize {
        self.levels.len() + 1
    }

    /// Expands a `(1, feature_dim, 1)` code into an `(N_s, 3)` point tensor.
    ///
    /// Every tree node sees its own feature concatenated with the code. Leaf
    /// patches are laid out in node order; the result is truncated, or
    /// tiled from the start, to exactly N_s points.
    pub fn decode<'t>(&self, ctx: &Ctx<'t, '_>, code: Var<'t>) -> Result<Var<'t>, NetError> {
        let shape = code.shape();
        if shape != [1, self.feature_dim, 1] {
            return Err(NetError::Config(format!(
                "code shape {shape:?} does not match (1, {}, 1)",
                self.feature_dim
            )));
        }
        let code = code.reshape(&[1, self.feature_dim])?;
        let mut nodes = self.root.forward(ctx, code)?.relu().reshape(&[TREE_ARITY, self.c0])?;
        let mut count = TREE_ARITY;
        for level in &self.levels {
            let input = Var::concat(&[nodes, broadcast_rows(code, count)?], 1)?;
            count *= TREE_ARITY;
            nodes = level.forward(ctx, input)?.relu().reshape(&[count, self.c0])?;
        }
        let input = Var::concat(&[nodes, broadcast_rows(code, count)?], 1)?;
        let points = self.leaf.forward(ctx, input)?.reshape(&[count * self.patch, 3])?;
        let total = count * self.patch;
        if total == self.output_points {
            return Ok(points);
        }
        let rows: Vec<usize> = (0..self.output_points).map(|i| i % total).collect();
        Ok(points.gather(&rows)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::chamfer;
    use crate::tensor::{finite_diff_check, Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn small_config() -> GenNetConfig {
        GenNetConfig {
            depth: 2,
            c0: 4,
            d_mid: 8,
            feature_dim: 6,
            ..GenNetConfig::default()
        }
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| [0; 3].map(|_| rng.gen_range(-0.5..0.5))).collect()).unwrap()
    }

    fn encoder(config: &GenNetConfig) -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = EncoderParams::new(&mut store, config, &mut rng);
        (store, enc)
    }

    fn encode_values(store: &ParamStore, enc: &EncoderParams, cloud: &PointCloud) -> Vec<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, false);
        enc.encode(&ctx, cloud).unwrap().value().data().to_vec()
    }

    #[test]
    fn code_has_batch_feature_one_shape() {
        let config = small_config();
        let (store, enc) = encoder(&config);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let code = enc.encode(&ctx, &random_cloud(40, 1)).unwrap();
        assert_eq!(code.shape(), vec![1, 6, 1]);
    }

    #[test]
    fn too_small_cloud_rejected() {
        let (store, enc) = encoder(&small_config());
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        assert!(matches!(
            enc.encode(&ctx, &random_cloud(7, 1)),
            Err(NetError::TooFewPoints(7))
        ));
    }

    #[test]
    fn permutation_invariant_under_geometric_seed() {
        let (store, enc) = encoder(&small_config());
        let cloud = random_cloud(48, 2);
        let mut pts = cloud.points().to_vec();
        pts.reverse();
        pts.swap(3, 17);
        let permuted = PointCloud::new(pts).unwrap();
        assert_eq!(encode_values(&store, &enc, &cloud), encode_values(&store, &enc, &permuted));
    }

    /// Rows (in original indexing) that win some max-pool channel inside
    /// the encoder, recomputed stage by stage outside `encode`.
    fn pooled_argmaxes(store: &ParamStore, enc: &EncoderParams, cloud: &PointCloud) -> BTreeSet<usize> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, false);
        let argmax_rows = |v: &Tensor, rows: &[usize], out: &mut BTreeSet<usize>| {
            let w = v.shape()[1];
            for ch in 0..w {
                let mut best = 0;
                for r in 1..rows.len() {
                    if v.data()[r * w + ch] > v.data()[best * w + ch] {
                        best = r;
                    }
                }
                out.insert(rows[best]);
            }
        };
        let n = cloud.len();
        let mut out = BTreeSet::new();
        let h0 = enc.h0.forward(&ctx, tape.constant(cloud.to_tensor())).unwrap();
        let all: Vec<usize> = (0..n).collect();
        argmax_rows(&h0.value(), &all, &mut out);
        let order = fps(cloud, n, FpsSeed::Lexicographic.resolve(cloud)).unwrap();
        for m in [n, n / 2, n / 8] {
            let local = h0.gather(&order[..m]).unwrap();
            argmax_rows(&local.value(), &order[..m], &mut out);
            let pooled = broadcast_rows(local.reduce_max(0).unwrap(), m).unwrap();
            let h1 = enc.h1.forward(&ctx, Var::concat(&[local, pooled], 1).unwrap()).unwrap();
            argmax_rows(&h1.value(), &order[..m], &mut out);
        }
        out
    }

    fn subset_sets(cloud: &PointCloud) -> Vec<BTreeSet<usize>> {
        let n = cloud.len();
        let order = fps(cloud, n, FpsSeed::Lexicographic.resolve(cloud)).unwrap();
        [n / 2, n / 8].iter().map(|&m| order[..m].iter().copied().collect()).collect()
    }

    #[test]
    fn moving_a_point_off_every_argmax_leaves_code_unchanged() {
        let (store, enc) = encoder(&small_config());
        let base = random_cloud(160, 3);
        let centroid = [0, 1, 2].map(|a| base.points().iter().map(|p| p[a]).sum::<f64>() / 160.0);
        let winners = pooled_argmaxes(&store, &enc, &base);
        let mut checked = 0;
        for j in (0..base.len()).filter(|j| !winners.contains(j)) {
            let mut pts = base.points().to_vec();
            pts[j] = [0, 1, 2].map(|a| 0.8 * pts[j][a] + 0.2 * centroid[a]);
            let moved = PointCloud::new(pts).unwrap();
            let unaffected = !pooled_argmaxes(&store, &enc, &moved).contains(&j)
                && FpsSeed::Lexicographic.resolve(&moved) == FpsSeed::Lexicographic.resolve(&base)
                && subset_sets(&moved) == subset_sets(&base);
            if unaffected {
                assert_eq!(encode_values(&store, &enc, &base), encode_values(&store, &enc, &moved));
                checked += 1;
            }
        }
        assert!(checked >= 10, "only {checked} adversarial candidates");
    }

    fn decoder(config: &GenNetConfig, n_s: usize) -> (ParamStore, DecoderParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dec = DecoderParams::new(&mut store, config, n_s, &mut rng);
        (store, dec)
    }

    #[test]
    fn depth_two_single_point_leaves_give_64_points() {
        let config = small_config();
        let (store, dec) = decoder(&config, 64);
        assert_eq!(dec.patch, 1);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let code = tape.constant(Tensor::full(&[1, 6, 1], 0.3));
        assert_eq!(dec.decode(&ctx, code).unwrap().shape(), vec![64, 3]);
    }

    #[test]
    fn depth_three_with_four_point_patches_trims_to_1792() {
        let config = GenNetConfig {
            depth: 3,
            ..small_config()
        };
        let (store, dec) = decoder(&config, 1792);
        assert_eq!(dec.patch, 4);
        assert_eq!(config.leaves() * dec.patch, 2048);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let out = dec.decode(&ctx, tape.constant(Tensor::full(&[1, 6, 1], 0.1))).unwrap();
        assert_eq!(out.shape(), vec![1792, 3]);
    }

    #[test]
    fn output_size_is_exact_for_any_target() {
        let config = small_config();
        for n_s in [1, 7, 63, 64, 65, 200] {
            let (store, mut dec) = decoder(&config, n_s);
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, false);
            let code = tape.constant(Tensor::full(&[1, 6, 1], 0.2));
            let out = dec.decode(&ctx, code).unwrap();
            assert_eq!(out.shape(), vec![n_s, 3]);
            // Forcing a patch that overshoots exercises truncation, and one
            // that undershoots exercises tiling.
            dec.output_points = 70;
            let tiled = dec.decode(&ctx, code).unwrap();
            assert_eq!(tiled.shape(), vec![70, 3]);
        }
    }

    #[test]
    fn tiling_repeats_from_the_start() {
        let config = small_config();
        let (store, mut dec) = decoder(&config, 64);
        dec.output_points = 130;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let out = dec.decode(&ctx, tape.constant(Tensor::full(&[1, 6, 1], 0.2))).unwrap().value();
        let d = out.data();
        assert_eq!(&d[64 * 3..65 * 3], &d[0..3]);
        assert_eq!(&d[128 * 3..130 * 3], &d[0..6]);
    }

    #[test]
    fn zero_code_maps_to_origin() {
        let (store, dec) = decoder(&small_config(), 64);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let out = dec.decode(&ctx, tape.constant(Tensor::zeros(&[1, 6, 1]))).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn code_shape_mismatch_rejected() {
        let (store, dec) = decoder(&small_config(), 64);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        assert!(dec.decode(&ctx, tape.constant(Tensor::zeros(&[1, 5, 1]))).is_err());
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let config = small_config();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let enc = EncoderParams::new(&mut store, &config, &mut rng);
        let dec = DecoderParams::new(&mut store, &config, 64, &mut rng);
        let input = random_cloud(32, 4);
        let target = random_cloud(32, 5).to_tensor();
        let ids: Vec<_> = store.ids().collect();
        let params: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
        let err = finite_diff_check(
            |tape, vars| {
                let ctx = Ctx::with_bindings(tape, &store, false, &ids, vars);
                let code = enc.encode(&ctx, &input).unwrap();
                let out = dec.decode(&ctx, code).unwrap();
                Ok(chamfer(out, tape.constant(target.clone())).unwrap())
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-3, "{err}");
    }
}
