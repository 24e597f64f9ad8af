//! Partial cross-entropy, the scribble-supervision loss and the weighted total.

use std::fmt;

use maco_autodiff::{Graph, NodeId, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::domain::{ScribbleAnnotation, BG, GC, UNLABELED};
use crate::error::{CoreError, Result};

pub const LOG_EPS: f64 = 1e-8;

/// Weights of the masked pCE, cc, en and con terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.5, lambda2: 0.1, lambda3: 0.1, lambda4: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3), ("lambda4", self.lambda4)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(CoreError::Param(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Pce,
    Mpce,
    Cc,
    En,
    Con,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::Pce, Term::Mpce, Term::Cc, Term::En, Term::Con];

    pub fn label(self) -> &'static str {
        match self {
            Term::Pce => "pCE",
            Term::Mpce => "mpCE",
            Term::Cc => "cc",
            Term::En => "en",
            Term::Con => "con",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Which optional terms take part; pCE always does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LossSet {
    pub mpce: bool,
    pub cc: bool,
    pub en: bool,
    pub con: bool,
}

impl LossSet {
    pub const ALL: LossSet = LossSet { mpce: true, cc: true, en: true, con: true };
    pub const PCE_ONLY: LossSet = LossSet { mpce: false, cc: false, en: false, con: false };

    pub fn from_terms(terms: &[Term]) -> Result<Self> {
        if !terms.contains(&Term::Pce) {
            return Err(CoreError::Param("pCE must be among the enabled losses".into()));
        }
        Ok(Self {
            mpce: terms.contains(&Term::Mpce),
            cc: terms.contains(&Term::Cc),
            en: terms.contains(&Term::En),
            con: terms.contains(&Term::Con),
        })
    }

    pub fn terms(&self) -> Vec<Term> {
        Term::ALL.into_iter().filter(|&t| self.contains(t)).collect()
    }

    pub fn contains(&self, t: Term) -> bool {
        match t {
            Term::Pce => true,
            Term::Mpce => self.mpce,
            Term::Cc => self.cc,
            Term::En => self.en,
            Term::Con => self.con,
        }
    }

    /// Rows of the ablation table, in the order they are reported.
    pub fn ablation_rows() -> [LossSet; 6] {
        let s = |mpce, cc, en, con| LossSet { mpce, cc, en, con };
        [
            s(false, false, false, false),
            s(false, true, false, false),
            s(true, true, false, false),
            s(true, true, true, false),
            s(false, false, false, true),
            s(true, true, true, true),
        ]
    }

    pub fn name(&self) -> String {
        self.terms().iter().map(|t| t.label()).collect::<Vec<_>>().join("+")
    }
}

/// Labelled pixels entering pCE for one annotation: foreground scribbles,
/// plus background scribbles if asked. GC never counts.
fn pce_pixels(scr: &ScribbleAnnotation, include_bg: bool, channels: usize) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (p, &l) in scr.labels().iter().enumerate() {
        match l {
            UNLABELED | GC => {}
            BG if !include_bg => {}
            _ if l as usize >= channels => {
                return Err(CoreError::LabelOutOfRange { label: l, channels });
            }
            _ => out.push((l as usize, p)),
        }
    }
    Ok(out)
}

/// Mean of `-ln(y_label + 1e-8)` over labelled pixels, averaged over items.
pub fn loss_pce<T: Real>(g: &mut Graph<T>, y: NodeId, scrs: &[&ScribbleAnnotation], include_bg: bool) -> Result<NodeId> {
    let [b, c, h, w] = g.value(y).dims4();
    if scrs.len() != b || scrs.iter().any(|s| s.dims() != (h, w)) {
        return Err(CoreError::Shape(format!("{} annotations for prediction [{b}, {c}, {h}, {w}]", scrs.len())));
    }
    let hw = h * w;
    let mut weights = vec![T::zero(); b * c * hw];
    let mut any = false;
    for (i, scr) in scrs.iter().enumerate() {
        let px = pce_pixels(scr, include_bg, c)?;
        if px.is_empty() {
            log::warn!("item {i} has no labelled pixels for pCE");
            continue;
        }
        any = true;
        let k = T::lit(-1.0 / (b as f64 * px.len() as f64));
        for (label, p) in px {
            weights[(i * c + label) * hw + p] = k;
        }
    }
    if !any {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let log = g.ln(y, T::lit(LOG_EPS));
    let weighted = g.mul_const(log, weights);
    Ok(g.sum(weighted))
}

/// `pCE(y) + lambda1 * pCE(y_m)`.
pub fn loss_ss<T: Real>(
    g: &mut Graph<T>,
    y: NodeId,
    y_m: NodeId,
    scrs: &[&ScribbleAnnotation],
    lambda1: f64,
    include_bg: bool,
) -> Result<NodeId> {
    let a = loss_pce(g, y, scrs, include_bg)?;
    if lambda1 == 0.0 {
        return Ok(a);
    }
    let m = loss_pce(g, y_m, scrs, include_bg)?;
    let m = g.scale(m, T::lit(lambda1));
    Ok(g.add(a, m))
}

/// Term nodes of one step; absent terms were not computed.
#[derive(Debug, Clone, Copy)]
pub struct TermNodes {
    pub pce: NodeId,
    pub mpce: Option<NodeId>,
    pub cc: Option<NodeId>,
    pub en: Option<NodeId>,
    pub con: Option<NodeId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub pce: f64,
    pub mpce: f64,
    pub cc: f64,
    pub en: f64,
    pub con: f64,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, t: Term) -> f64 {
        match t {
            Term::Pce => self.pce,
            Term::Mpce => self.mpce,
            Term::Cc => self.cc,
            Term::En => self.en,
            Term::Con => self.con,
        }
    }
}

/// Coefficient a term enters the total with; zero when disabled.
pub fn coefficient(t: Term, weights: &LossWeights, enabled: &LossSet) -> f64 {
    if !enabled.contains(t) {
        return 0.0;
    }
    match t {
        Term::Pce => 1.0,
        Term::Mpce => weights.lambda1,
        Term::Cc => weights.lambda2,
        Term::En => weights.lambda3,
        Term::Con => weights.lambda4,
    }
}

/// `pCE + λ1 mpCE + λ2 cc + λ3 en + λ4 con`. A term with a zero coefficient
/// is skipped entirely, so disabling a term and zeroing its weight build the
/// same graph.
pub fn loss_total<T: Real>(
    g: &mut Graph<T>,
    terms: &TermNodes,
    weights: &LossWeights,
    enabled: &LossSet,
) -> Result<(NodeId, LossReport)> {
    weights.validate()?;
    let mut report = LossReport::default();
    let slots = [
        (Term::Pce, Some(terms.pce)),
        (Term::Mpce, terms.mpce),
        (Term::Cc, terms.cc),
        (Term::En, terms.en),
        (Term::Con, terms.con),
    ];
    let mut total: Option<NodeId> = None;
    for (t, node) in slots {
        let value = node.map(|n| g.scalar(n).as_f64()).unwrap_or(0.0);
        if !value.is_finite() {
            return Err(CoreError::NonFinite(format!("loss term {t}")));
        }
        match t {
            Term::Pce => report.pce = value,
            Term::Mpce => report.mpce = value,
            Term::Cc => report.cc = value,
            Term::En => report.en = value,
            Term::Con => report.con = value,
        }
        let k = coefficient(t, weights, enabled);
        if k == 0.0 {
            continue;
        }
        let node = node.ok_or_else(|| CoreError::Param(format!("term {t} is enabled but was not computed")))?;
        let scaled = if k == 1.0 { node } else { g.scale(node, T::lit(k)) };
        total = Some(match total {
            None => scaled,
            Some(acc) => g.add(acc, scaled),
        });
    }
    let total = total.expect("pCE always contributes");
    report.total = g.scalar(total).as_f64();
    if !report.total.is_finite() {
        return Err(CoreError::NonFinite("total loss".into()));
    }
    Ok((total, report))
}
