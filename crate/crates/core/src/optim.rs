//! SGD, Adam, AdamW and LAMB with per-parameter state.
//!
//! Moments are kept in f64 regardless of the parameter element type, so a
//! serialized state restores bit-exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    Adam,
    AdamW,
    Lamb,
}

impl OptimKind {
    fn code(self) -> u8 {
        match self {
            OptimKind::Sgd => 0,
            OptimKind::Adam => 1,
            OptimKind::AdamW => 2,
            OptimKind::Lamb => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [OptimKind::Sgd, OptimKind::Adam, OptimKind::AdamW, OptimKind::Lamb]
            .into_iter()
            .find(|k| k.code() == c)
    }
}

/// Optional-field form used when reading plans; missing values take the
/// per-kind defaults.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimSpec {
    kind: OptimKind,
    lr: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    weight_decay: Option<f64>,
    momentum: Option<f64>,
}

impl From<OptimSpec> for OptimConfig {
    fn from(s: OptimSpec) -> Self {
        let d = OptimConfig::new(s.kind);
        OptimConfig {
            kind: s.kind,
            lr: s.lr.unwrap_or(d.lr),
            beta1: s.beta1.unwrap_or(d.beta1),
            beta2: s.beta2.unwrap_or(d.beta2),
            eps: s.eps.unwrap_or(d.eps),
            weight_decay: s.weight_decay.unwrap_or(d.weight_decay),
            momentum: s.momentum.unwrap_or(d.momentum),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "OptimSpec")]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl OptimConfig {
    pub fn new(kind: OptimKind) -> Self {
        let (eps, weight_decay) = match kind {
            OptimKind::Sgd | OptimKind::Adam => (1e-8, 0.0),
            OptimKind::AdamW => (1e-8, 0.01),
            OptimKind::Lamb => (1e-6, 0.01),
        };
        OptimConfig {
            kind,
            lr: 1.5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            weight_decay,
            momentum: 0.0,
        }
    }

    pub fn lamb() -> Self {
        Self::new(OptimKind::Lamb)
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.momentum);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::lamb()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    shape: Vec<usize>,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimConfig,
    t: u64,
    slots: BTreeMap<String, Slot>,
}

const BLOB_MAGIC: &[u8; 4] = b"GCOP";

fn l2(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            t: 0,
            slots: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn slot_names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    /// Applies one update to every trainable parameter of `store`.
    pub fn step<E: Element>(&mut self, store: &mut ParamStore<E>) -> Result<()> {
        let ids = store.trainable_ids();
        let mut grads = Vec::with_capacity(ids.len());
        for &id in &ids {
            let e = store.entry(id);
            let g = e
                .value
                .grad_vec()
                .ok_or_else(|| Error::MissingGrad(e.name.clone()))?;
            grads.push(g);
        }
        self.t += 1;
        let cfg = self.config;
        let t = self.t as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (&id, g) in ids.iter().zip(grads) {
            let entry = store.entry(id);
            let w: Vec<f64> = entry.value.data().iter().map(|x| x.to_f64_lossy()).collect();
            let g: Vec<f64> = g.iter().map(|x| x.to_f64_lossy()).collect();
            let slot = self.slots.entry(entry.name.clone()).or_insert_with(|| Slot {
                shape: entry.value.shape().to_vec(),
                m: vec![0.0; w.len()],
                v: match cfg.kind {
                    OptimKind::Sgd => Vec::new(),
                    _ => vec![0.0; w.len()],
                },
            });
            let new_w: Vec<f64> = match cfg.kind {
                OptimKind::Sgd => {
                    let mut out = Vec::with_capacity(w.len());
                    for k in 0..w.len() {
                        let gk = g[k] + cfg.weight_decay * w[k];
                        let step = if cfg.momentum > 0.0 {
                            slot.m[k] = cfg.momentum * slot.m[k] + gk;
                            slot.m[k]
                        } else {
                            gk
                        };
                        out.push(w[k] - cfg.lr * step);
                    }
                    out
                }
                OptimKind::Adam | OptimKind::AdamW | OptimKind::Lamb => {
                    let coupled = cfg.kind == OptimKind::Adam;
                    let mut r = Vec::with_capacity(w.len());
                    for k in 0..w.len() {
                        let gk = if coupled { g[k] + cfg.weight_decay * w[k] } else { g[k] };
                        slot.m[k] = cfg.beta1 * slot.m[k] + (1.0 - cfg.beta1) * gk;
                        slot.v[k] = cfg.beta2 * slot.v[k] + (1.0 - cfg.beta2) * gk * gk;
                        let m_hat = slot.m[k] / bc1;
                        let v_hat = slot.v[k] / bc2;
                        r.push(m_hat / (v_hat.sqrt() + cfg.eps));
                    }
                    match cfg.kind {
                        OptimKind::Adam => w.iter().zip(&r).map(|(w, r)| w - cfg.lr * r).collect(),
                        OptimKind::AdamW => w
                            .iter()
                            .zip(&r)
                            .map(|(w, r)| w - cfg.lr * r - cfg.lr * cfg.weight_decay * w)
                            .collect(),
                        _ => {
                            for (rk, wk) in r.iter_mut().zip(&w) {
                                *rk += cfg.weight_decay * wk;
                            }
                            let (wn, rn) = (l2(&w), l2(&r));
                            let trust = if wn == 0.0 || rn == 0.0 { 1.0 } else { wn / rn };
                            w.iter().zip(&r).map(|(w, r)| w - cfg.lr * trust * r).collect()
                        }
                    }
                }
            };
            store.set_values(id, new_w.into_iter().map(E::from_f64_lossy).collect())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BLOB_MAGIC);
        out.push(self.config.kind.code());
        let c = &self.config;
        for x in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay, c.momentum] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&self.t.to_le_bytes());
        out.extend_from_slice(&(self.slots.len() as u32).to_le_bytes());
        for (name, slot) in &self.slots {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(slot.shape.len() as u32).to_le_bytes());
            for &d in &slot.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for buf in [&slot.m, &slot.v] {
                out.extend_from_slice(&(buf.len() as u64).to_le_bytes());
                for x in buf.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    /// Decodes a state blob and checks its slots against `store`.
    pub fn restore<E: Element>(bytes: &[u8], store: &ParamStore<E>) -> Result<Self> {
        let mut rd = Reader { buf: bytes, pos: 0 };
        if rd.take(4)? != BLOB_MAGIC {
            return Err(Error::Checkpoint("optimizer blob has bad magic".into()));
        }
        let kind = OptimKind::from_code(rd.take(1)?[0])
            .ok_or_else(|| Error::Checkpoint("unknown optimizer kind".into()))?;
        let mut h = [0.0; 6];
        for x in &mut h {
            *x = rd.f64()?;
        }
        let config = OptimConfig {
            kind,
            lr: h[0],
            beta1: h[1],
            beta2: h[2],
            eps: h[3],
            weight_decay: h[4],
            momentum: h[5],
        };
        let t = rd.u64()?;
        let n = rd.u32()? as usize;
        let mut slots = BTreeMap::new();
        for _ in 0..n {
            let len = rd.u32()? as usize;
            let name = String::from_utf8(rd.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("slot name is not UTF-8".into()))?;
            let rank = rd.u32()? as usize;
            let shape = (0..rank)
                .map(|_| rd.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let mut bufs = [Vec::new(), Vec::new()];
            for buf in &mut bufs {
                let len = rd.u64()? as usize;
                *buf = (0..len).map(|_| rd.f64()).collect::<Result<Vec<_>>>()?;
            }
            let [m, v] = bufs;
            let param = store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer slot `{name}` has no matching parameter")))?;
            if store.get(param).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "optimizer slot `{name}` has shape {shape:?}, parameter has {:?}",
                    store.get(param).shape()
                )));
            }
            slots.insert(name, Slot { shape, m, v });
        }
        if rd.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after optimizer state".into()));
        }
        Ok(Optimizer { config, t, slots })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("optimizer state is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;
    use crate::tensor::Tensor;

    fn store_with(w: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Group::EncoderTheta, Tensor::from_vec(w.to_vec(), &[w.len()]).unwrap());
        s
    }

    fn set_grad(store: &ParamStore<f64>, g: &[f64]) {
        store.zero_grad();
        let w = store.get(store.find("w").unwrap());
        let gt = Tensor::from_vec(g.to_vec(), &[g.len()]).unwrap();
        w.mul(&gt).unwrap().sum_all().backward().unwrap();
    }

    #[test]
    fn sgd_hand_example() {
        let mut s = store_with(&[1.0]);
        set_grad(&s, &[2.0]);
        let mut opt = Optimizer::new(OptimConfig::new(OptimKind::Sgd).with_lr(0.1)).unwrap();
        opt.step(&mut s).unwrap();
        assert!((s.get(s.find("w").unwrap()).item() - 0.8).abs() < 1e-12);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = store_with(&[0.0]);
        set_grad(&s, &[1.0]);
        let cfg = OptimConfig::new(OptimKind::Adam).with_lr(0.01);
        let mut opt = Optimizer::new(cfg).unwrap();
        opt.step(&mut s).unwrap();
        let expected = -0.01 * 1.0 / (1.0 + 1e-8);
        assert!((s.get(s.find("w").unwrap()).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn lamb_zero_norm_matches_adamw() {
        let run = |kind| {
            let mut s = store_with(&[0.0, 0.0]);
            set_grad(&s, &[1.0, -3.0]);
            let cfg = OptimConfig { eps: 1e-6, ..OptimConfig::new(kind) };
            let mut opt = Optimizer::new(cfg).unwrap();
            opt.step(&mut s).unwrap();
            s.get(s.find("w").unwrap()).to_vec()
        };
        assert_eq!(run(OptimKind::Lamb), run(OptimKind::AdamW));
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut s = store_with(&[1.0]);
        let mut opt = Optimizer::new(OptimConfig::lamb()).unwrap();
        assert!(matches!(opt.step(&mut s), Err(Error::MissingGrad(n)) if n == "w"));
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut s = store_with(&[1.0]);
        s.add("u", Group::EncoderPhi, Tensor::from_vec(vec![2.0], &[1]).unwrap());
        s.freeze(Group::EncoderPhi);
        let mut opt = Optimizer::new(OptimConfig::lamb()).unwrap();
        for _ in 0..5 {
            set_grad(&s, &[1.0]);
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.get(s.find("u").unwrap()).item().to_bits(), 2.0f64.to_bits());
        assert_ne!(s.get(s.find("w").unwrap()).item(), 1.0);
        assert_eq!(opt.slot_names().collect::<Vec<_>>(), vec!["w"]);
    }

    #[test]
    fn empty_state_roundtrip() {
        let s = store_with(&[1.0]);
        let opt = Optimizer::new(OptimConfig::new(OptimKind::AdamW)).unwrap();
        assert_eq!(Optimizer::restore(&opt.to_bytes(), &s).unwrap(), opt);
    }

    #[test]
    fn restore_rejects_renamed_or_reshaped() {
        let mut s = store_with(&[1.0, 2.0]);
        set_grad(&s, &[1.0, 1.0]);
        let mut opt = Optimizer::new(OptimConfig::lamb()).unwrap();
        opt.step(&mut s).unwrap();
        let blob = opt.to_bytes();
        let mut renamed = ParamStore::<f64>::new();
        renamed.add("w2", Group::EncoderTheta, Tensor::zeros(&[2]));
        assert!(matches!(Optimizer::restore(&blob, &renamed), Err(Error::Checkpoint(_))));
        let reshaped = store_with(&[1.0, 2.0, 3.0]);
        assert!(matches!(Optimizer::restore(&blob, &reshaped), Err(Error::Checkpoint(_))));
        assert!(matches!(Optimizer::restore(&blob[..10], &s), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn plan_defaults_fill_in() {
        let cfg: OptimConfig = serde_json::from_str(r#"{"kind":"lamb","lr":0.01}"#).unwrap();
        assert_eq!(cfg, OptimConfig::lamb().with_lr(0.01));
        let cfg: OptimConfig = serde_json::from_str(r#"{"kind":"adam"}"#).unwrap();
        assert_eq!(cfg.eps, 1e-8);
        let back: OptimConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
