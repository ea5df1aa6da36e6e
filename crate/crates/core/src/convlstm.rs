//! Convolutional LSTM cell and sequence layer.
//!
//! The four gates come from one fused convolution over the channel
//! concatenation `[x_t, h_{t-1}]`, producing `4F` channels split in the order
//! input, forget, candidate, output:
//!
//! ```text
//! i = σ(z_i)   f = σ(z_f)   g = tanh(z_g)   o = σ(z_o)
//! c' = f ∘ c + i ∘ g
//! h' = o ∘ tanh(c')
//! ```
//!
//! With `peephole` enabled, per-channel weights add `w_ci∘c`, `w_cf∘c` to the
//! input and forget gates and `w_co∘c'` to the output gate.

use std::cell::Cell;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{conv2d, Padding};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Hidden and cell state, both `[H, W, F]`.
#[derive(Debug, Clone)]
pub struct ConvLstmState<E: Element> {
    pub hidden: Tensor<E>,
    pub cell: Tensor<E>,
}

impl<E: Element> ConvLstmState<E> {
    pub fn zeros(h: usize, w: usize, filters: usize) -> Self {
        ConvLstmState {
            hidden: Tensor::zeros(&[h, w, filters]),
            cell: Tensor::zeros(&[h, w, filters]),
        }
    }

    pub fn new(hidden: Tensor<E>, cell: Tensor<E>) -> Result<Self> {
        if hidden.shape() != cell.shape() || hidden.rank() != 3 {
            return Err(shape_err!(
                "hidden {:?} and cell {:?} must share an [H, W, F] shape",
                hidden.shape(),
                cell.shape()
            ));
        }
        Ok(ConvLstmState { hidden, cell })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvLstmSpec {
    pub in_channels: usize,
    pub filters: usize,
    pub kernel: (usize, usize),
    pub peephole: bool,
    pub forget_bias: f64,
}

impl ConvLstmSpec {
    pub fn new(in_channels: usize, filters: usize) -> Self {
        ConvLstmSpec {
            in_channels,
            filters,
            kernel: (3, 3),
            peephole: false,
            forget_bias: 1.0,
        }
    }

    /// `4 * (kh*kw*(Cin+F)*F + F)`, plus `3F` peephole weights when enabled.
    pub fn param_count(&self) -> usize {
        let (kh, kw) = self.kernel;
        let f = self.filters;
        let gates = 4 * (kh * kw * (self.in_channels + f) * f + f);
        gates + if self.peephole { 3 * f } else { 0 }
    }
}

#[derive(Debug)]
pub struct ConvLstmLayer {
    pub name: String,
    pub spec: ConvLstmSpec,
    weight: ParamId,
    bias: ParamId,
    peephole: Option<[ParamId; 3]>,
    steps: Cell<u64>,
}

impl Clone for ConvLstmLayer {
    fn clone(&self) -> Self {
        ConvLstmLayer {
            name: self.name.clone(),
            spec: self.spec,
            weight: self.weight,
            bias: self.bias,
            peephole: self.peephole,
            steps: Cell::new(0),
        }
    }
}

impl ConvLstmLayer {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        group: Group,
        spec: ConvLstmSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (kh, kw) = spec.kernel;
        if spec.in_channels == 0 || spec.filters == 0 || kh == 0 || kw == 0 {
            return Err(Error::Config(format!(
                "{name}: channels, filters and kernel must be positive"
            )));
        }
        let f = spec.filters;
        let cat = spec.in_channels + f;
        let weight = store.glorot(
            format!("{name}.weight"),
            group,
            &[kh, kw, cat, 4 * f],
            kh * kw * cat,
            kh * kw * 4 * f,
            rng,
        );
        let mut b = vec![0.0; 4 * f];
        b[f..2 * f].iter_mut().for_each(|v| *v = spec.forget_bias);
        let bias = store.add(
            format!("{name}.bias"),
            group,
            Tensor::from_f64s(&b, &[4 * f])?,
        );
        let peephole = spec.peephole.then(|| {
            ["ci", "cf", "co"].map(|g| store.constant(format!("{name}.peep_{g}"), group, &[1, 1, f], 0.0))
        });
        Ok(ConvLstmLayer {
            name: name.to_string(),
            spec,
            weight,
            bias,
            peephole,
            steps: Cell::new(0),
        })
    }

    pub fn filters(&self) -> usize {
        self.spec.filters
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.weight, self.bias];
        if let Some(p) = self.peephole {
            ids.extend(p);
        }
        ids
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Number of cell steps executed since construction or the last reset.
    pub fn steps(&self) -> u64 {
        self.steps.get()
    }

    pub fn reset_steps(&self) {
        self.steps.set(0);
    }

    pub fn zero_state<E: Element>(&self, h: usize, w: usize) -> ConvLstmState<E> {
        ConvLstmState::zeros(h, w, self.spec.filters)
    }

    pub fn cell_step<E: Element>(
        &self,
        store: &ParamStore<E>,
        x: &Tensor<E>,
        state: &ConvLstmState<E>,
    ) -> Result<ConvLstmState<E>> {
        let f = self.spec.filters;
        let &[h, w, cin] = x.shape() else {
            return Err(shape_err!("{}: step input must be [H, W, C], got {:?}", self.name, x.shape()));
        };
        if cin != self.spec.in_channels {
            return Err(shape_err!(
                "{}: expected {} input channels, got {cin}",
                self.name,
                self.spec.in_channels
            ));
        }
        if state.hidden.shape() != [h, w, f] || state.cell.shape() != [h, w, f] {
            return Err(shape_err!(
                "{}: state {:?} does not match input grid {:?} with {f} filters",
                self.name,
                state.hidden.shape(),
                (h, w)
            ));
        }
        self.steps.set(self.steps.get() + 1);

        let joined = Tensor::concat(&[x.clone(), state.hidden.clone()], 2)?;
        let z = conv2d(&joined, store.get(self.weight), Some(store.get(self.bias)), 1, Padding::Same)?;
        let gate = |k: usize| z.slice(2, k * f, (k + 1) * f);
        let (mut zi, mut zf, zg, mut zo) = (gate(0)?, gate(1)?, gate(2)?, gate(3)?);
        let peep = self.peephole.map(|p| p.map(|id| store.get(id).clone()));
        if let Some([ci, cf, _]) = &peep {
            zi = zi.add(&state.cell.mul(ci)?)?;
            zf = zf.add(&state.cell.mul(cf)?)?;
        }
        let i = zi.sigmoid();
        let fg = zf.sigmoid();
        let g = zg.tanh();
        let cell = fg.mul(&state.cell)?.add(&i.mul(&g)?)?;
        if let Some([_, _, co]) = &peep {
            zo = zo.add(&cell.mul(co)?)?;
        }
        let o = zo.sigmoid();
        let hidden = o.mul(&cell.tanh())?;
        Ok(ConvLstmState { hidden, cell })
    }

    /// Runs the recurrence over `xs: [T, H, W, Cin]`. `init = None` starts from
    /// zero hidden and cell states. Returns every hidden state stacked as
    /// `[T, H, W, F]` together with the final state.
    pub fn run_sequence<E: Element>(
        &self,
        store: &ParamStore<E>,
        xs: &Tensor<E>,
        init: Option<&ConvLstmState<E>>,
    ) -> Result<(Tensor<E>, ConvLstmState<E>)> {
        let &[t, h, w, _] = xs.shape() else {
            return Err(shape_err!("{}: sequence must be [T, H, W, C], got {:?}", self.name, xs.shape()));
        };
        if t == 0 {
            return Err(Error::Degenerate(format!("{}: empty input sequence", self.name)));
        }
        let mut state = match init {
            Some(s) => s.clone(),
            None => self.zero_state(h, w),
        };
        let mut outputs = Vec::with_capacity(t);
        for step in 0..t {
            state = self.cell_step(store, &xs.select(0, step)?, &state)?;
            outputs.push(state.hidden.clone());
        }
        Ok((Tensor::stack(&outputs)?, state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn layer(cin: usize, f: usize, seed: u64) -> (ParamStore<f64>, ConvLstmLayer) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[]);
        let l = ConvLstmLayer::new(&mut store, "l", Group::EncoderTheta, ConvLstmSpec::new(cin, f), &mut r).unwrap();
        (store, l)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, &[99]);
        let n: usize = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| r.gen_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    fn zero_all(store: &mut ParamStore<f64>) {
        for id in store.ids().collect::<Vec<_>>() {
            let n = store.get(id).numel();
            store.set_values(id, vec![0.0; n]).unwrap();
        }
    }

    #[test]
    fn param_count_formula() {
        let (store, l) = layer(8, 16, 0);
        assert_eq!(l.param_count(), 13_888);
        assert_eq!(store.total_count(), 13_888);
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let (mut store, l) = layer(3, 4, 1);
        zero_all(&mut store);
        let x = random(&[5, 5, 3], 7);
        let s = l.cell_step(&store, &x, &l.zero_state(5, 5)).unwrap();
        assert!(s.hidden.data().iter().all(|&v| v == 0.0));
        assert!(s.cell.data().iter().all(|&v| v == 0.0));
        let (out, fin) = l.run_sequence(&store, &random(&[4, 5, 5, 3], 8), None).unwrap();
        assert_eq!(out.shape(), &[4, 5, 5, 4]);
        assert!(out.data().iter().chain(fin.cell.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let (mut store, l) = layer(2, 3, 2);
        let bias = store.find("l.bias").unwrap();
        let mut b = store.get(bias).to_vec();
        b[3..6].iter_mut().for_each(|v| *v = 10.0);
        store.set_values(bias, b).unwrap();
        let w = store.find("l.weight").unwrap();
        // only the forget block of the kernel is zeroed so f = σ(10)
        let mut wv = store.get(w).to_vec();
        for (k, v) in wv.iter_mut().enumerate() {
            let ch = k % 12;
            if (3..6).contains(&ch) {
                *v = 0.0;
            }
        }
        store.set_values(w, wv).unwrap();
        let state = ConvLstmState::new(random(&[4, 4, 3], 3), random(&[4, 4, 3], 4)).unwrap();
        let x = random(&[4, 4, 2], 5);
        let next = l.cell_step(&store, &x, &state).unwrap();
        // c' - c = (f-1) c + i g, so |c' - c - i g| <= |σ(10)-1| |c|
        let sig10 = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((1.0 - sig10) < 5e-5);
        let z = conv2d(
            &Tensor::concat(&[x, state.hidden.clone()], 2).unwrap(),
            store.get(w),
            Some(store.get(bias)),
            1,
            Padding::Same,
        )
        .unwrap();
        let i = z.slice(2, 0, 3).unwrap().sigmoid();
        let g = z.slice(2, 6, 9).unwrap().tanh();
        let ig = i.mul(&g).unwrap();
        for k in 0..next.cell.numel() {
            let c = state.cell.data()[k];
            let resid = next.cell.data()[k] - c - ig.data()[k];
            assert!(resid.abs() <= (1.0 - sig10) * c.abs() + 1e-15);
        }
    }

    #[test]
    fn single_step_sequence_matches_cell() {
        let (store, l) = layer(2, 3, 3);
        let xs = random(&[1, 4, 4, 2], 9);
        let (out, fin) = l.run_sequence(&store, &xs, None).unwrap();
        let step = l.cell_step(&store, &xs.select(0, 0).unwrap(), &l.zero_state(4, 4)).unwrap();
        assert_eq!(out.select(0, 0).unwrap().data(), step.hidden.data());
        assert_eq!(fin.cell.data(), step.cell.data());
    }

    #[test]
    fn split_sequence_identity_f64() {
        let (store, l) = layer(2, 3, 4);
        let a = random(&[3, 5, 4, 2], 10);
        let b = random(&[4, 5, 4, 2], 11);
        let (whole, fin_whole) = l.run_sequence(&store, &Tensor::concat(&[a.clone(), b.clone()], 0).unwrap(), None).unwrap();
        let (_, mid) = l.run_sequence(&store, &a, None).unwrap();
        let (tail, fin_tail) = l.run_sequence(&store, &b, Some(&mid)).unwrap();
        assert_eq!(whole.slice(0, 3, 7).unwrap().data(), tail.data());
        assert_eq!(fin_whole.cell.data(), fin_tail.cell.data());
    }

    #[test]
    fn errors() {
        let (store, l) = layer(2, 3, 5);
        let empty = Tensor::<f64>::zeros(&[0, 4, 4, 2]);
        assert!(matches!(l.run_sequence(&store, &empty, None), Err(Error::Degenerate(_))));
        let x = random(&[4, 4, 2], 1);
        let wrong = l.zero_state(5, 4);
        assert!(matches!(l.cell_step(&store, &x, &wrong), Err(Error::Shape(_))));
        assert!(ConvLstmState::new(Tensor::<f64>::zeros(&[2, 2, 1]), Tensor::zeros(&[2, 2, 2])).is_err());
    }

    #[test]
    fn peephole_adds_three_f() {
        let mut store = ParamStore::<f32>::new();
        let mut r = rng::stream(0, &[]);
        let spec = ConvLstmSpec { peephole: true, ..ConvLstmSpec::new(4, 5) };
        let l = ConvLstmLayer::new(&mut store, "p", Group::DecoderTheta, spec, &mut r).unwrap();
        assert_eq!(store.total_count(), ConvLstmSpec::new(4, 5).param_count() + 15);
        assert_eq!(l.param_count(), store.total_count());
        let (out, _) = l.run_sequence(&store, &Tensor::ones(&[2, 3, 3, 4]), None).unwrap();
        assert_eq!(out.shape(), &[2, 3, 3, 5]);
    }

    #[test]
    fn steps_are_counted() {
        let (store, l) = layer(1, 1, 6);
        l.run_sequence(&store, &Tensor::zeros(&[5, 2, 2, 1]), None).unwrap();
        assert_eq!(l.steps(), 5);
        l.reset_steps();
        assert_eq!(l.steps(), 0);
    }
}
