mod common;

use maco_autodiff::{build_unet, grad_check, grad_check_many, Graph, Mode, NodeId, Tensor, UNetConfig};
use maco_core::cpl::{build_cpl, loss_con, CplStack, ConForm, ConOptions};
use maco_core::domain::{LabelGrid, BG, GC, UNLABELED};
use maco_core::losses::{loss_pce, loss_total, LossSet, LossWeights, Term, TermNodes};
use maco_core::mcm::{enhance, gc_binary_mask, loss_cc, loss_en, patch_weights, sample_mask, McmConfig};
use maco_core::CoreError;
use proptest::prelude::*;
use rand_xoshiro::Xoshiro256StarStar;

const K: u8 = 3;
const B: usize = 2;
const H: usize = 8;
const W: usize = 8;
const TOL: f64 = 1e-4;

struct Instance {
    logits: Tensor<f64>,
    scrs: Vec<LabelGrid>,
    cpls: Vec<CplStack>,
    masks: Vec<Vec<bool>>,
}

fn instance(rng: &mut Xoshiro256StarStar) -> Instance {
    let logits = common::random_tensor(rng, &[B, K as usize + 1, H, W], -2.0, 2.0);
    let scrs: Vec<LabelGrid> = (0..B).map(|_| common::random_scribble(rng, H, W, K)).collect();
    let cpls: Vec<CplStack> = scrs.iter().map(|s| build_cpl(s, K as usize, 0.1, 0.05).unwrap()).collect();
    let masks = cpls.iter().map(|c| gc_binary_mask(&c.gc).unwrap()).collect();
    Instance { logits, scrs, cpls, masks }
}

impl Instance {
    fn scr_refs(&self) -> Vec<&LabelGrid> {
        self.scrs.iter().collect()
    }

    fn cpl_refs(&self) -> Vec<&CplStack> {
        self.cpls.iter().collect()
    }
}

fn probs(g: &mut Graph<f64>, logits: NodeId) -> NodeId {
    g.softmax_channels(logits)
}

#[test]
fn pce_gradient() {
    let mut rng = common::rng(101);
    for i in 0..10 {
        let inst = instance(&mut rng);
        let err = grad_check::<_, CoreError>(
            |g, x| {
                let y = probs(g, x);
                loss_pce(g, y, &inst.scr_refs(), i % 2 == 0)
            },
            &inst.logits,
            1e-5,
        )
        .unwrap();
        assert!(err <= TOL, "instance {i}: {err}");
    }
}

#[test]
fn cc_and_en_gradients() {
    let mut rng = common::rng(102);
    for i in 0..10 {
        let inst = instance(&mut rng);
        let other = common::random_tensor(&mut rng, inst.logits.shape(), -2.0, 2.0);
        let cc = grad_check_many::<_, CoreError>(
            |g, ids| {
                let y = probs(g, ids[0]);
                let y_m = probs(g, ids[1]);
                let y_e = enhance(g, y, &inst.masks)?;
                loss_cc(g, y_m, y_e)
            },
            &[inst.logits.clone(), other],
            1e-5,
        )
        .unwrap();
        assert!(cc <= TOL, "cc instance {i}: {cc}");
        let en = grad_check::<_, CoreError>(
            |g, x| {
                let y = probs(g, x);
                let y_e = enhance(g, y, &inst.masks)?;
                loss_en(g, y, y_e)
            },
            &inst.logits,
            1e-5,
        )
        .unwrap();
        assert!(en <= TOL, "en instance {i}: {en}");
    }
}

#[test]
fn con_gradient() {
    let mut rng = common::rng(103);
    for i in 0..10 {
        let inst = instance(&mut rng);
        let form = if i % 2 == 0 { ConForm::EntropyWeighted } else { ConForm::CrossEntropy };
        let opts = ConOptions { form, gc_in_con: i % 3 != 0 };
        let err = grad_check::<_, CoreError>(
            |g, x| {
                let y = probs(g, x);
                loss_con(g, y, &inst.cpl_refs(), opts)
            },
            &inst.logits,
            1e-5,
        )
        .unwrap();
        assert!(err <= TOL, "instance {i}: {err}");
    }
}

fn total_through_net(
    g: &mut Graph<f64>,
    net: &maco_autodiff::UNet<f64>,
    ids: &[NodeId],
    inst: &Instance,
    keep: &[f64],
) -> Result<NodeId, CoreError> {
    let (x, params) = (ids[0], &ids[1..]);
    let y = net.forward(g, params, x, Mode::Train)?.probs;
    let x_m = g.mul_const(x, keep.to_vec());
    let y_m = net.forward(g, params, x_m, Mode::Train)?.probs;
    let scrs = inst.scr_refs();
    let pce = loss_pce(g, y, &scrs, false)?;
    let mpce = loss_pce(g, y_m, &scrs, false)?;
    let y_e = enhance(g, y, &inst.masks)?;
    let cc = loss_cc(g, y_m, y_e)?;
    let en = loss_en(g, y, y_e)?;
    let con = loss_con(g, y, &inst.cpl_refs(), ConOptions::default())?;
    let terms = TermNodes { pce, mpce: Some(mpce), cc: Some(cc), en: Some(en), con: Some(con) };
    let (total, _) = loss_total(g, &terms, &LossWeights::default(), &LossSet::ALL)?;
    // biases feeding a norm layer have exactly zero gradient; a small objective
    // keeps their differencing noise under the relative-error floor
    Ok(g.scale(total, 1e-3))
}

#[test]
fn total_gradient_through_tiny_unet() {
    let mut rng = common::rng(104);
    let cfg = UNetConfig { depth: 2, base_channels: 4, out_classes: K as usize + 1, groups: 2, seed: 7, ..UNetConfig::default() };
    let net = build_unet::<f64>(&cfg).unwrap();
    let mcm = McmConfig { patch_size: 4, ..McmConfig::default() };
    for i in 0..10 {
        let inst = instance(&mut rng);
        let x = common::random_tensor(&mut rng, &[B, 1, H, W], 0.0, 1.0);
        let mut keep = Vec::new();
        for s in &inst.scrs {
            let pm = sample_mask(&patch_weights(s, &mcm).unwrap(), 0.5, &mut rng).unwrap();
            keep.extend(pm.keep_map().iter().map(|&v| v as f64));
        }
        let mut inputs = vec![x];
        inputs.extend(net.params().iter().cloned());
        let err = grad_check_many::<_, CoreError>(|g, ids| total_through_net(g, &net, ids, &inst, &keep), &inputs, 1e-5)
            .unwrap();
        assert!(err <= TOL, "instance {i}: {err}");
    }
}

fn eval_probs(y: &[f64], shape: &[usize]) -> (Graph<f64>, NodeId) {
    let mut g = Graph::new();
    let id = g.constant(Tensor::new(shape.to_vec(), y.to_vec()).unwrap());
    (g, id)
}

/// Direct evaluation of the pseudo-label loss from its definition.
fn con_oracle(y: &[f64], cpls: &[CplStack], opts: ConOptions) -> f64 {
    let c = K as usize + 1;
    let hw = H * W;
    let mut total = 0.0;
    for (i, st) in cpls.iter().enumerate() {
        let at = |ch: usize, p: usize| y[(i * c + ch) * hw + p];
        let supervised = (0..hw)
            .filter(|&p| st.classes.iter().any(|m| m.data[p] > 0.0) || (opts.gc_in_con && st.gc.data[p] > 0.0))
            .count();
        let n_c = (c - 1) + opts.gc_in_con as usize;
        let mut s = 0.0;
        for p in 0..hw {
            let mut pairs: Vec<(f64, f64)> = (1..c).map(|ch| (st.classes[ch - 1].data[p], at(ch, p))).collect();
            if opts.gc_in_con {
                pairs.push((st.gc.data[p], 1.0 - at(BG as usize, p)));
            }
            for (w, v) in pairs {
                let l = (v + 1e-8).ln();
                s += w * match opts.form {
                    ConForm::EntropyWeighted => v * l,
                    ConForm::CrossEntropy => l,
                };
            }
        }
        total += -s / (n_c as f64 * supervised as f64);
    }
    total / cpls.len() as f64
}

fn pce_oracle(y: &[f64], scrs: &[LabelGrid], include_bg: bool) -> f64 {
    let c = K as usize + 1;
    let hw = H * W;
    let mut total = 0.0;
    for (i, s) in scrs.iter().enumerate() {
        let mut acc = 0.0;
        let mut n = 0usize;
        for (p, &l) in s.labels().iter().enumerate() {
            if l == UNLABELED || l == GC || (l == BG && !include_bg) {
                continue;
            }
            acc += -(y[(i * c + l as usize) * hw + p] + 1e-8).ln();
            n += 1;
        }
        total += acc / n as f64;
    }
    total / scrs.len() as f64
}

fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() / B;
    let mut total = 0.0;
    for i in 0..B {
        let (x, y) = (&a[i * n..(i + 1) * n], &b[i * n..(i + 1) * n]);
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += 1.0 - dot / (nx * ny + 1e-8);
    }
    total / B as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_match_direct_evaluation(seed in any::<u64>(), include_bg in any::<bool>(), gc_in_con in any::<bool>(), ce in any::<bool>()) {
        let mut rng = common::rng(seed);
        let inst = instance(&mut rng);
        let y = common::softmax(&inst.logits);
        let shape = inst.logits.shape().to_vec();
        let (mut g, yid) = eval_probs(&y, &shape);

        let pce = loss_pce(&mut g, yid, &inst.scr_refs(), include_bg).unwrap();
        prop_assert!((g.scalar(pce) - pce_oracle(&y, &inst.scrs, include_bg)).abs() < 1e-10);

        let opts = ConOptions { form: if ce { ConForm::CrossEntropy } else { ConForm::EntropyWeighted }, gc_in_con };
        let con = loss_con(&mut g, yid, &inst.cpl_refs(), opts).unwrap();
        prop_assert!((g.scalar(con) - con_oracle(&y, &inst.cpls, opts)).abs() < 1e-10);

        let y_e = enhance(&mut g, yid, &inst.masks).unwrap();
        let masked: Vec<f64> = y.iter().enumerate().map(|(j, &v)| {
            let hw = H * W;
            let item = j / ((K as usize + 1) * hw);
            if inst.masks[item][j % hw] { v } else { 0.0 }
        }).collect();
        prop_assert_eq!(g.value(y_e).data(), &masked[..]);
        let en = loss_en(&mut g, yid, y_e).unwrap();
        prop_assert!((g.scalar(en) - cosine_oracle(&y, &masked)).abs() < 1e-10);
        prop_assert!(g.scalar(en) >= -1e-12 && g.scalar(en) <= 2.0);
    }
}

#[test]
fn cosine_identities() {
    let mut rng = common::rng(7);
    let a = common::random_tensor(&mut rng, &[B, 4, H, W], 0.0, 1.0);
    let mut g = Graph::<f64>::new();
    let x = g.constant(a.clone());
    let y = g.constant(a);
    let same = loss_cc(&mut g, x, y).unwrap();
    // the denominator epsilon leaves a residue of order 1e-8 / |a|^2
    assert!(g.scalar(same).abs() < 1e-7, "{}", g.scalar(same));

    // disjoint supports are orthogonal
    let n = 4 * H * W;
    let p: Vec<f64> = (0..B * n).map(|j| if (j % n) < n / 2 { 1.0 } else { 0.0 }).collect();
    let q: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
    let p = g.constant(Tensor::new(vec![B, 4, H, W], p).unwrap());
    let q = g.constant(Tensor::new(vec![B, 4, H, W], q).unwrap());
    let orth = loss_cc(&mut g, p, q).unwrap();
    assert!((g.scalar(orth) - 1.0).abs() < 1e-12);
    let en = loss_en(&mut g, p, q).unwrap();
    assert!((g.scalar(en) - 1.0).abs() < 1e-12);
}

#[test]
fn total_is_the_weighted_sum() {
    let mut rng = common::rng(8);
    for _ in 0..10 {
        let inst = instance(&mut rng);
        let other = common::random_tensor(&mut rng, inst.logits.shape(), -2.0, 2.0);
        let mut g = Graph::<f64>::new();
        let yl = g.constant(inst.logits.clone());
        let y = g.softmax_channels(yl);
        let ml = g.constant(other);
        let y_m = g.softmax_channels(ml);
        let scrs = inst.scr_refs();
        let pce = loss_pce(&mut g, y, &scrs, false).unwrap();
        let mpce = loss_pce(&mut g, y_m, &scrs, false).unwrap();
        let y_e = enhance(&mut g, y, &inst.masks).unwrap();
        let cc = loss_cc(&mut g, y_m, y_e).unwrap();
        let en = loss_en(&mut g, y, y_e).unwrap();
        let con = loss_con(&mut g, y, &inst.cpl_refs(), ConOptions::default()).unwrap();
        let terms = TermNodes { pce, mpce: Some(mpce), cc: Some(cc), en: Some(en), con: Some(con) };
        let (total, report) = loss_total(&mut g, &terms, &LossWeights::default(), &LossSet::ALL).unwrap();
        let want = g.scalar(pce) + 0.5 * g.scalar(mpce) + 0.1 * (g.scalar(cc) + g.scalar(en) + g.scalar(con));
        assert!((g.scalar(total) - want).abs() <= 1e-6);
        assert_eq!(report.total, g.scalar(total));

        // a disabled term and a zero weight give the same total
        let no_en = LossSet::from_terms(&[Term::Pce, Term::Mpce, Term::Cc, Term::Con]).unwrap();
        let (a, _) = loss_total(&mut g, &terms, &LossWeights::default(), &no_en).unwrap();
        let zero = LossWeights { lambda3: 0.0, ..LossWeights::default() };
        let (b, _) = loss_total(&mut g, &terms, &zero, &LossSet::ALL).unwrap();
        assert_eq!(g.scalar(a).to_bits(), g.scalar(b).to_bits());
    }
}

#[test]
fn nan_is_reported_with_its_term() {
    let mut g = Graph::<f64>::new();
    let ok = g.constant(Tensor::scalar(1.0));
    let bad = g.constant(Tensor::scalar(f64::NAN));
    let terms = TermNodes { pce: ok, mpce: None, cc: None, en: None, con: Some(bad) };
    let set = LossSet::from_terms(&[Term::Pce, Term::Con]).unwrap();
    let err = loss_total(&mut g, &terms, &LossWeights::default(), &set).unwrap_err();
    assert!(err.to_string().contains("con"), "{err}");
}
