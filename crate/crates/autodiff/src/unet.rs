//! Compact encoder–decoder with skip connections.
//!
//! Each level is two 3×3 conv → norm → ReLU stages; levels are joined by
//! 2×2 max pooling on the way down and 2×2 stride-2 transposed convolutions
//! on the way up. A 1×1 head and a channel softmax produce class
//! probabilities at input resolution.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::NnError;
use crate::graph::{Graph, NodeId};
use crate::scalar::Real;
use crate::tensor::Tensor;

const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Group,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_classes: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub norm: NormKind,
    pub groups: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_classes: 4,
            depth: 3,
            base_channels: 8,
            norm: NormKind::Group,
            groups: 4,
            seed: 42,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let fail = |m: String| Err(NnError::Config(m));
        if self.depth < 2 {
            return fail(format!("depth {} < 2", self.depth));
        }
        if self.base_channels < 4 {
            return fail(format!("base_channels {} < 4", self.base_channels));
        }
        if self.in_channels == 0 {
            return fail("in_channels must be positive".into());
        }
        if self.out_classes < 2 {
            return fail(format!("out_classes {} < 2", self.out_classes));
        }
        if self.norm == NormKind::Group
            && (self.groups == 0 || self.base_channels % self.groups != 0)
        {
            return fail(format!(
                "groups {} must divide base_channels {}",
                self.groups, self.base_channels
            ));
        }
        Ok(())
    }

    /// Channel width at encoder level `level`.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial dims must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    gamma: usize,
    beta: usize,
    slot: usize,
}

#[derive(Debug, Clone)]
struct Block {
    name: String,
    conv1: ConvIdx,
    norm1: NormIdx,
    conv2: ConvIdx,
    norm2: NormIdx,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<Block>,
    up: Vec<ConvIdx>,
    decoder: Vec<Block>,
    head: ConvIdx,
    norm_slots: Vec<usize>,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    norm_slots: Vec<usize>,
}

impl LayoutBuilder {
    fn param(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.specs.push(ParamSpec { name, shape });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, ci: usize, co: usize, k: usize) -> ConvIdx {
        ConvIdx {
            w: self.param(format!("{name}.weight"), vec![co, ci, k, k]),
            b: self.param(format!("{name}.bias"), vec![co]),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormIdx {
        let gamma = self.param(format!("{name}.gamma"), vec![c]);
        let beta = self.param(format!("{name}.beta"), vec![c]);
        self.norm_slots.push(c);
        NormIdx { gamma, beta, slot: self.norm_slots.len() - 1 }
    }

    fn block(&mut self, name: &str, ci: usize, co: usize) -> Block {
        Block {
            name: name.to_string(),
            conv1: self.conv(&format!("{name}.conv1"), ci, co, 3),
            norm1: self.norm(&format!("{name}.norm1"), co),
            conv2: self.conv(&format!("{name}.conv2"), co, co, 3),
            norm2: self.norm(&format!("{name}.norm2"), co),
        }
    }
}

fn build_layout(cfg: &UNetConfig) -> (Layout, Vec<ParamSpec>) {
    let mut lb = LayoutBuilder { specs: Vec::new(), norm_slots: Vec::new() };
    let mut encoder = Vec::with_capacity(cfg.depth);
    for level in 0..cfg.depth {
        let ci = if level == 0 { cfg.in_channels } else { cfg.width(level - 1) };
        encoder.push(lb.block(&format!("enc{level}"), ci, cfg.width(level)));
    }
    let mut up = Vec::new();
    let mut decoder = Vec::new();
    for level in (0..cfg.depth - 1).rev() {
        let (wide, narrow) = (cfg.width(level + 1), cfg.width(level));
        let name = format!("up{level}");
        up.push(ConvIdx {
            w: lb.param(format!("{name}.weight"), vec![wide, narrow, 2, 2]),
            b: lb.param(format!("{name}.bias"), vec![narrow]),
        });
        decoder.push(lb.block(&format!("dec{level}"), 2 * narrow, narrow));
    }
    let head = lb.conv("head", cfg.width(0), cfg.out_classes, 1);
    let layout = Layout { encoder, up, decoder, head, norm_slots: lb.norm_slots };
    (layout, lb.specs)
}

/// Per-norm-layer batch moments gathered by a training-mode forward pass.
pub type BatchMoments<T> = Vec<Vec<(T, T)>>;

pub struct Forward<T> {
    pub probs: NodeId,
    pub logits: NodeId,
    pub moments: BatchMoments<T>,
}

#[derive(Debug, Clone)]
pub struct UNet<T> {
    cfg: UNetConfig,
    layout: Layout,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor<T>>,
    /// Running (mean, var) per batch-norm layer; unused under group norm.
    running: Vec<(Vec<T>, Vec<T>)>,
}

/// He-uniform fan-in of a parameter, `None` for parameters that start at a constant.
fn fan_in(spec: &ParamSpec) -> Option<usize> {
    if spec.name.ends_with(".weight") {
        let s = &spec.shape;
        if spec.name.starts_with("up") {
            // each transposed-conv output pixel sees one tap per input channel
            Some(s[0])
        } else {
            Some(s[1] * s[2] * s[3])
        }
    } else {
        None
    }
}

/// Builds and initializes a network from its config.
pub fn build_unet<T: Real>(cfg: &UNetConfig) -> Result<UNet<T>, NnError> {
    cfg.validate()?;
    let (layout, specs) = build_layout(cfg);
    let mut rng = Xoshiro256StarStar::seed_from_u64(cfg.seed);
    let params = specs
        .iter()
        .map(|spec| {
            let n: usize = spec.shape.iter().product();
            let data: Vec<T> = match fan_in(spec) {
                Some(fan) => {
                    let bound = (6.0 / fan as f64).sqrt();
                    (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()
                }
                None if spec.name.ends_with(".gamma") => vec![T::one(); n],
                None => vec![T::zero(); n],
            };
            Tensor::new(spec.shape.clone(), data).expect("spec shape")
        })
        .collect();
    let running = layout
        .norm_slots
        .iter()
        .map(|&c| (vec![T::zero(); c], vec![T::one(); c]))
        .collect();
    Ok(UNet { cfg: cfg.clone(), layout, specs, params, running })
}

impl<T: Real> UNet<T> {
    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[(Vec<T>, Vec<T>)] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [(Vec<T>, Vec<T>)] {
        &mut self.running
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Same network in another element type.
    pub fn cast<U: Real>(&self) -> UNet<U> {
        let conv = |v: &Vec<T>| v.iter().map(|&x| U::lit(x.as_f64())).collect::<Vec<U>>();
        UNet {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            specs: self.specs.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            running: self.running.iter().map(|(m, v)| (conv(m), conv(v))).collect(),
        }
    }

    /// Adds every parameter to `g` as a trainable leaf, in declaration order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<NodeId> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<(), NnError> {
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(NnError::Shape(format!(
                "expected input [batch, {}, h, w], got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let d = self.cfg.divisor();
        if shape[2] % d != 0 || shape[3] % d != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(NnError::InputDims { height: shape[2], width: shape[3], divisor: d });
        }
        Ok(())
    }

    /// Records a forward pass on `g` using already-bound parameter nodes.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        params: &[NodeId],
        x: NodeId,
        mode: Mode,
    ) -> Result<Forward<T>, NnError> {
        self.check_input(g.shape(x))?;
        if params.len() != self.params.len() {
            return Err(NnError::Shape(format!(
                "{} parameter nodes bound, network has {}",
                params.len(),
                self.params.len()
            )));
        }
        let mut moments = vec![Vec::new(); self.layout.norm_slots.len()];
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for (level, block) in self.layout.encoder.iter().enumerate() {
            if level > 0 {
                h = g.max_pool2(h);
            }
            h = self.block(g, params, block, h, mode, &mut moments)?;
            skips.push(h);
        }
        skips.pop();
        for (up, block) in self.layout.up.iter().zip(&self.layout.decoder) {
            h = g.conv_transpose2x2(h, params[up.w], params[up.b]);
            let skip = skips.pop().expect("one skip per decoder level");
            h = g.concat_channels(skip, h);
            h = self.block(g, params, block, h, mode, &mut moments)?;
        }
        let logits = g.conv2d(h, params[self.layout.head.w], params[self.layout.head.b]);
        check_finite(g, logits, "head")?;
        let probs = g.softmax_channels(logits);
        check_finite(g, probs, "softmax")?;
        Ok(Forward { probs, logits, moments })
    }

    fn block(
        &self,
        g: &mut Graph<T>,
        params: &[NodeId],
        block: &Block,
        x: NodeId,
        mode: Mode,
        moments: &mut BatchMoments<T>,
    ) -> Result<NodeId, NnError> {
        let mut h = x;
        for (i, (conv, norm)) in [(block.conv1, block.norm1), (block.conv2, block.norm2)]
            .into_iter()
            .enumerate()
        {
            h = g.conv2d(h, params[conv.w], params[conv.b]);
            h = self.norm(g, params, norm, h, mode, moments);
            h = g.relu(h);
            check_finite(g, h, &format!("{}.stage{}", block.name, i + 1))?;
        }
        Ok(h)
    }

    fn norm(
        &self,
        g: &mut Graph<T>,
        params: &[NodeId],
        norm: NormIdx,
        x: NodeId,
        mode: Mode,
        moments: &mut BatchMoments<T>,
    ) -> NodeId {
        let (gamma, beta) = (params[norm.gamma], params[norm.beta]);
        match (self.cfg.norm, mode) {
            (NormKind::Group, _) => g.group_norm(x, gamma, beta, self.cfg.groups),
            (NormKind::Batch, Mode::Train) => {
                let (y, m) = g.batch_norm_train(x, gamma, beta);
                moments[norm.slot] = m;
                y
            }
            (NormKind::Batch, Mode::Eval) => {
                let (mean, var) = &self.running[norm.slot];
                g.batch_norm_eval(x, gamma, beta, mean, var)
            }
        }
    }

    /// Folds training-mode batch moments into the running statistics.
    pub fn absorb_moments(&mut self, moments: &BatchMoments<T>) {
        let m = T::lit(BN_MOMENTUM);
        for ((mean, var), batch) in self.running.iter_mut().zip(moments) {
            for (i, &(bm, bv)) in batch.iter().enumerate() {
                mean[i] = (T::one() - m) * mean[i] + m * bm;
                var[i] = (T::one() - m) * var[i] + m * bv;
            }
        }
    }

    /// Eval-mode class probabilities for a `[batch, in, h, w]` input.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut g = Graph::new();
        let params: Vec<NodeId> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let x = g.constant(input.clone());
        let out = self.forward(&mut g, &params, x, Mode::Eval)?;
        Ok(g.value(out.probs).clone())
    }

    /// Replaces the parameters with values of identical shapes.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<(), NnError> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(NnError::Shape("parameter set does not match the layout".into()));
        }
        self.params = params;
        Ok(())
    }
}

fn check_finite<T: Real>(g: &Graph<T>, id: NodeId, layer: &str) -> Result<(), NnError> {
    if g.value(id).all_finite() {
        Ok(())
    } else {
        Err(NnError::NonFinite(layer.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form parameter count from layer dimensions.
    fn analytic_count(cfg: &UNetConfig) -> usize {
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
        let norm = |c: usize| 2 * c;
        let block = |ci: usize, co: usize| conv(ci, co, 3) + norm(co) + conv(co, co, 3) + norm(co);
        let mut total = 0;
        for l in 0..cfg.depth {
            let ci = if l == 0 { cfg.in_channels } else { cfg.width(l - 1) };
            total += block(ci, cfg.width(l));
        }
        for l in 0..cfg.depth - 1 {
            total += cfg.width(l + 1) * cfg.width(l) * 4 + cfg.width(l);
            total += block(2 * cfg.width(l), cfg.width(l));
        }
        total + conv(cfg.width(0), cfg.out_classes, 1)
    }

    #[test]
    fn parameter_count_matches_layer_arithmetic() {
        let cfg = UNetConfig::default();
        let net = build_unet::<f32>(&cfg).unwrap();
        assert_eq!(net.param_count(), analytic_count(&cfg));
        // hand-evaluated for depth 3, base 8, one input channel, four classes
        assert_eq!(net.param_count(), 29_668);
        for depth in 2..5 {
            let cfg = UNetConfig { depth, base_channels: 4, out_classes: 3, ..cfg.clone() };
            assert_eq!(build_unet::<f64>(&cfg).unwrap().param_count(), analytic_count(&cfg));
        }
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let cfg = UNetConfig::default();
        let a = build_unet::<f32>(&cfg).unwrap();
        let b = build_unet::<f32>(&cfg).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        let c = build_unet::<f32>(&UNetConfig { seed: 7, ..cfg }).unwrap();
        assert_ne!(a.params()[0], c.params()[0]);
    }

    #[test]
    fn output_shape_and_softmax_contract() {
        let cfg = UNetConfig::default();
        let net = build_unet::<f32>(&cfg).unwrap();
        let data: Vec<f32> = (0..64 * 64).map(|i| ((i * 7919) % 97) as f32 / 97.0 - 0.5).collect();
        let x = Tensor::new(vec![1, 1, 64, 64], data).unwrap();
        let y = net.predict(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 64, 64]);
        let hw = 64 * 64;
        for p in 0..hw {
            let s: f32 = (0..4).map(|c| y.data()[c * hw + p]).sum();
            assert!((s - 1.0).abs() <= 1e-5);
        }
        assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let cfg = UNetConfig::default();
        let mut net = build_unet::<f64>(&cfg).unwrap();
        let n = net.params().len();
        for p in &mut net.params_mut()[n - 2..] {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::new(vec![1, 1, 16, 16], (0..256).map(|i| i as f64 / 256.0).collect()).unwrap();
        let y = net.predict(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn rejects_indivisible_input() {
        let net = build_unet::<f32>(&UNetConfig::default()).unwrap();
        let x = Tensor::new(vec![1, 1, 10, 12], vec![0.0; 120]).unwrap();
        assert!(matches!(net.predict(&x), Err(NnError::InputDims { divisor: 4, .. })));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = UNetConfig::default();
        assert!(build_unet::<f32>(&UNetConfig { depth: 1, ..base.clone() }).is_err());
        assert!(build_unet::<f32>(&UNetConfig { base_channels: 2, ..base.clone() }).is_err());
        assert!(build_unet::<f32>(&UNetConfig { groups: 3, ..base }).is_err());
    }

    #[test]
    fn batch_equals_stacked_singles_in_eval_mode() {
        for norm in [NormKind::Group, NormKind::Batch] {
            let cfg = UNetConfig { norm, ..UNetConfig::default() };
            let net = build_unet::<f64>(&cfg).unwrap();
            let a: Vec<f64> = (0..256).map(|i| ((i * 31) % 17) as f64 / 17.0).collect();
            let b: Vec<f64> = (0..256).map(|i| ((i * 13) % 23) as f64 / 23.0 - 0.3).collect();
            let ya = net.predict(&Tensor::new(vec![1, 1, 16, 16], a.clone()).unwrap()).unwrap();
            let yb = net.predict(&Tensor::new(vec![1, 1, 16, 16], b.clone()).unwrap()).unwrap();
            let both = net
                .predict(&Tensor::new(vec![2, 1, 16, 16], [a, b].concat()).unwrap())
                .unwrap();
            let stacked = [ya.data(), yb.data()].concat();
            for (x, y) in both.data().iter().zip(&stacked) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
