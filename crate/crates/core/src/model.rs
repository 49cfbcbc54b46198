//! The full completion network: encoder, tree decoder, graph fusion,
//! local features and GCN deformation.

use serde::{Deserialize, Serialize};

use crate::deform::{build_graph, DeformConfig, DeformGraph, FeatureExtractor, GcnParams};
use crate::gen_net::{DecoderParams, EncoderParams, GenNetConfig, NetError};
use crate::geometry::{chamfer, PointCloud};
use crate::losses::{matching_loss, shape_preserving_loss, total_loss, LossReport, LossTerms, LossWeights, ShapeLossForm};
use crate::nn::Ctx;
use crate::seed::{stream_rng, streams};
use crate::tensor::{ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// N: points in a training input.
    pub input_points: usize,
    /// N_o: points in the completed cloud.
    pub output_points: usize,
    /// N_c: controlling points taken from the input.
    pub control_points: usize,
    pub shape_loss: ShapeLossForm,
    pub gen: GenNetConfig,
    pub deform: DeformConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_points: 512,
            output_points: 512,
            control_points: 64,
            shape_loss: ShapeLossForm::Change,
            gen: GenNetConfig::default(),
            deform: DeformConfig::default(),
        }
    }
}

impl ModelConfig {
    /// N_s = N_o − N_c.
    pub fn supporting_points(&self) -> usize {
        self.output_points.saturating_sub(self.control_points)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        self.gen.validate()?;
        self.deform.validate()?;
        let (n, n_o, n_c) = (self.input_points, self.output_points, self.control_points);
        if n < crate::gen_net::MIN_ENCODER_POINTS {
            return Err(NetError::TooFewPoints(n));
        }
        if n_c == 0 || n_c > n || n_c >= n_o {
            return Err(NetError::Config(format!(
                "need 1 <= control_points <= input_points and control_points < output_points, got N_c = {n_c}, N = {n}, N_o = {n_o}"
            )));
        }
        if self.deform.k >= n_o {
            return Err(NetError::Config(format!("k = {} must be below output_points = {n_o}", self.deform.k)));
        }
        Ok(())
    }
}

/// All learnable state plus the layer layout that reads it.
#[derive(Clone, Debug)]
pub struct CompletionModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub features: FeatureExtractor,
    pub gcn: GcnParams,
}

/// Tape nodes of one forward pass.
pub struct ForwardPass<'t> {
    pub code: Var<'t>,
    /// P_s, the decoder output.
    pub p_s: Var<'t>,
    /// P_g = P_c ++ P_s.
    pub p_g: Var<'t>,
    /// P_o, the deformed cloud.
    pub p_o: Var<'t>,
    pub graph: DeformGraph,
}

impl CompletionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = stream_rng(seed, streams::INIT, 0);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(&mut store, &config.gen, &mut rng);
        let decoder = DecoderParams::new(&mut store, &config.gen, config.supporting_points(), &mut rng);
        let features = FeatureExtractor::new(&mut store, &config.deform, &mut rng);
        let width = features.width() + config.gen.feature_dim + 3 + 1;
        let gcn = GcnParams::new(&mut store, &config.deform, width, &mut rng);
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            features,
            gcn,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, input: &PointCloud) -> Result<ForwardPass<'t>, NetError> {
        let code = self.encoder.encode(ctx, input)?;
        let p_s = self.decoder.decode(ctx, code)?;
        let p_s_cloud = PointCloud::from_tensor(&p_s.value())?;
        let graph = build_graph(
            input,
            &p_s_cloud,
            self.config.control_points,
            self.config.deform.k,
            self.config.deform.fps_seed,
        )?;
        let controls = ctx.tape.constant(graph.controls().to_tensor());
        let p_g = Var::concat(&[controls, p_s], 0)?;
        let r = self.features.radius_for(input);
        let feats = self.features.forward(ctx, p_g, &graph.merged, input, r)?;
        let (p_o, _) = self.gcn.deform(ctx, &graph, p_g, feats, code)?;
        Ok(ForwardPass {
            code,
            p_s,
            p_g,
            p_o,
            graph,
        })
    }

    /// Loss terms of a forward pass against the ground truth, weighted with
    /// `lambda` on the final-output Chamfer term.
    pub fn loss<'t>(
        &self,
        pass: &ForwardPass<'t>,
        gt: &PointCloud,
        weights: &LossWeights,
        lambda: f64,
    ) -> Result<(Var<'t>, LossReport), NetError> {
        let tape = pass.p_o.tape();
        let gt = tape.constant(gt.to_tensor());
        let n_c = pass.graph.control_count;
        let rows: Vec<usize> = (0..n_c).collect();
        let before = tape.constant(pass.graph.controls().to_tensor());
        let terms = LossTerms {
            cd_intermediate: chamfer(pass.p_s, gt)?,
            cd_final: chamfer(pass.p_o, gt)?,
            matching: matching_loss(before, pass.p_o.gather(&rows)?)?,
            shape: shape_preserving_loss(pass.p_g, pass.p_o, &pass.graph.graph, self.config.shape_loss)?,
        };
        Ok(total_loss(&terms, weights, lambda)?)
    }

    /// Eval-mode completion. Returns `(P_o, P_s, control mask)`.
    pub fn complete(&self, input: &PointCloud) -> Result<(PointCloud, PointCloud, Vec<bool>), NetError> {
        let tape = crate::tensor::Tape::new();
        let ctx = Ctx::new(&tape, &self.store, false);
        let pass = self.forward(&ctx, input)?;
        let p_o = PointCloud::from_tensor(&pass.p_o.value())?;
        let p_s = PointCloud::from_tensor(&pass.p_s.value())?;
        let mask = pass.graph.labels.iter().map(|&l| l == 1.0).collect();
        Ok((p_o, p_s, mask))
    }

    /// Eval-mode intermediate cloud P_g, i.e. the result without deformation.
    pub fn complete_without_deformation(&self, input: &PointCloud) -> Result<PointCloud, NetError> {
        let tape = crate::tensor::Tape::new();
        let ctx = Ctx::new(&tape, &self.store, false);
        let code = self.encoder.encode(&ctx, input)?;
        let p_s = PointCloud::from_tensor(&self.decoder.decode(&ctx, code)?.value())?;
        let graph = build_graph(
            input,
            &p_s,
            self.config.control_points,
            self.config.deform.k,
            self.config.deform.fps_seed,
        )?;
        Ok(graph.merged)
    }
}
