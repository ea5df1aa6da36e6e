//! Gradient checks of every differentiable op, shared by the gradient test
//! target and the acceptance run. Each check returns named worst relative
//! errors.

use gridcast::convlstm::{ConvLstmLayer, ConvLstmSpec, ConvLstmState};
use gridcast::model::{DualUNet, ModelConfig};
use gridcast::nn::{self, Mode, Padding};
use gridcast::params::{Group, ParamStore};
use gridcast::tensor::Reduce;
use gridcast::Tensor;

use super::{check_inputs, check_store, rng, uniform, weighted_sum};

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

fn record(out: &mut Vec<(String, f64)>, name: &str, err: f64) {
    out.push((name.to_string(), err));
}

/// All op checks in one list.
pub fn all_ops() -> Vec<(String, f64)> {
    [
        elementwise_ops(),
        activations(),
        reductions_and_loss(),
        shape_ops(),
        convolutions(),
        pooling_and_dropout(),
        convlstm_sequence(),
    ]
    .concat()
}

pub fn elementwise_ops() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(1);
    let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let b = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let row = uniform(&mut r, &[1, 4], -2.0, 2.0);
    let s = uniform(&mut r, &[1, 1], -2.0, 2.0);
    record(&mut out, "add", check_inputs(&[a.clone(), b.clone()], |x| weighted_sum(&x[0].add(&x[1]).unwrap(), 1), 100, 0));
    record(&mut out, "sub", check_inputs(&[a.clone(), b.clone()], |x| weighted_sum(&x[0].sub(&x[1]).unwrap(), 2), 100, 0));
    record(&mut out, "mul", check_inputs(&[a.clone(), b.clone()], |x| weighted_sum(&x[0].mul(&x[1]).unwrap(), 3), 100, 0));
    record(&mut out, "mul broadcast row", check_inputs(&[a.clone(), row.clone()], |x| weighted_sum(&x[0].mul(&x[1]).unwrap(), 4), 100, 0));
    record(&mut out, "add broadcast scalar", check_inputs(&[a.clone(), s], |x| weighted_sum(&x[0].add(&x[1]).unwrap(), 5), 100, 0));
    record(&mut out, "mul_scalar", check_inputs(std::slice::from_ref(&a), |x| weighted_sum(&x[0].mul_scalar(-1.7), 6), 100, 0));
    record(&mut out, "add_scalar", check_inputs(std::slice::from_ref(&a), |x| weighted_sum(&x[0].add_scalar(0.3), 7), 100, 0));
    out
}

pub fn activations() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(2);
    let a = uniform(&mut r, &[5, 3], -4.0, 4.0);
    record(&mut out, "sigmoid", check_inputs(std::slice::from_ref(&a), |x| weighted_sum(&x[0].sigmoid(), 1), 100, 0));
    record(&mut out, "tanh", check_inputs(std::slice::from_ref(&a), |x| weighted_sum(&x[0].tanh(), 2), 100, 0));
    // Keep relu inputs away from the kink.
    let away: Vec<f64> = a.to_vec().iter().map(|v| if v.abs() < 0.1 { v + 0.5 } else { *v }).collect();
    let away = Tensor::from_vec(away, &[5, 3]).unwrap();
    record(&mut out, "relu", check_inputs(&[away], |x| weighted_sum(&x[0].relu(), 3), 100, 0));
    out
}

pub fn reductions_and_loss() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(3);
    let a = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    let t = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    for (k, op) in [Reduce::Sum, Reduce::Mean].into_iter().enumerate() {
        for axes in [vec![0], vec![1], vec![2], vec![0, 2]] {
            for keep in [false, true] {
                let err = check_inputs(std::slice::from_ref(&a), |x| weighted_sum(&x[0].reduce(op, &axes, keep).unwrap(), k as u64), 100, 0);
                record(&mut out, &format!("{op:?} {axes:?} keep={keep}"), err);
            }
        }
    }
    record(&mut out, "mse_loss", check_inputs(std::slice::from_ref(&a), |x| x[0].mse_loss(&t).unwrap(), 100, 0));
    record(&mut out, "mean_all", check_inputs(&[a], |x| x[0].mean_all().unwrap(), 100, 0));
    out
}

pub fn shape_ops() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(4);
    let a = uniform(&mut r, &[3, 4, 2], -1.0, 1.0);
    let b = uniform(&mut r, &[3, 1, 2], -1.0, 1.0);
    record(&mut out, "reshape", check_inputs(std::slice::from_ref(&a), |x| weighted_sum(&x[0].reshape(&[4, 6]).unwrap(), 1), 100, 0));
    record(&mut out, "slice", check_inputs(std::slice::from_ref(&a), |x| weighted_sum(&x[0].slice(1, 1, 3).unwrap(), 2), 100, 0));
    record(&mut out, "select", check_inputs(std::slice::from_ref(&a), |x| weighted_sum(&x[0].select(2, 1).unwrap(), 3), 100, 0));
    record(&mut out, "concat", check_inputs(&[a.clone(), b], |x| weighted_sum(&Tensor::concat(x, 1).unwrap(), 4), 100, 0));
    record(&mut out, "stack", check_inputs(&[a.clone(), a.clone()], |x| weighted_sum(&Tensor::stack(x).unwrap(), 5), 100, 0));
    record(&mut out, "repeat", check_inputs(std::slice::from_ref(&a), |x| weighted_sum(&x[0].repeat(3).unwrap(), 6), 100, 0));
    record(&mut out, 
        "unstack",
        check_inputs(&[a], |x| {
            let parts = x[0].unstack().unwrap();
            weighted_sum(&parts[0].mul(&parts[2]).unwrap(), 7)
        }, 100, 0),
    );
    out
}

pub fn convolutions() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(5);
    let x = uniform(&mut r, &[2, 5, 6, 3], -1.0, 1.0);
    let w = uniform(&mut r, &[3, 3, 3, 4], -0.5, 0.5);
    let b = uniform(&mut r, &[4], -0.5, 0.5);
    for (pad, stride) in [(Padding::Same, 1), (Padding::Valid, 1), (Padding::Same, 2), (Padding::Valid, 2)] {
        let err = check_inputs(&[x.clone(), w.clone(), b.clone()], |v| {
            weighted_sum(&nn::conv2d(&v[0], &v[1], Some(&v[2]), stride, pad).unwrap(), 1)
        }, 60, 0);
        record(&mut out, &format!("conv2d {pad:?} stride {stride}"), err);
    }
    let wt = uniform(&mut r, &[2, 2, 3, 4], -0.5, 0.5);
    for crop in [None, Some((9, 11))] {
        let err = check_inputs(&[x.clone(), wt.clone(), b.clone()], |v| {
            weighted_sum(&nn::conv2d_transpose(&v[0], &v[1], Some(&v[2]), 2, crop).unwrap(), 2)
        }, 60, 0);
        record(&mut out, &format!("conv2d_transpose crop {crop:?}"), err);
    }
    let w3 = uniform(&mut r, &[3, 2], -1.0, 1.0);
    let b3 = uniform(&mut r, &[3], -1.0, 1.0);
    let seq = uniform(&mut r, &[2, 3, 3, 2], -1.0, 1.0);
    let err = check_inputs(&[seq, w3, b3], |v| weighted_sum(&nn::conv3d_1x1(&v[0], &v[1], &v[2]).unwrap(), 3), 60, 0);
    record(&mut out, "conv3d_1x1", err);
    out
}

pub fn pooling_and_dropout() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(6);
    // Distinct values keep the max away from ties; odd sizes exercise ceil mode.
    let n = 2 * 5 * 7 * 2;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    use rand::seq::SliceRandom;
    vals.shuffle(&mut r);
    let x = Tensor::from_vec(vals, &[2, 5, 7, 2]).unwrap();
    record(&mut out, "maxpool2", check_inputs(std::slice::from_ref(&x), |v| weighted_sum(&nn::maxpool2(&v[0]).unwrap(), 1), 200, 0));
    let err = check_inputs(&[x], |v| {
        let mut dr = rng(42);
        weighted_sum(&nn::spatial_dropout(&v[0], 0.5, Mode::Train, &mut dr).unwrap(), 2)
    }, 200, 0);
    record(&mut out, "spatial_dropout", err);
    out
}

pub fn convlstm_sequence() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for peephole in [false, true] {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(7);
        let spec = ConvLstmSpec { peephole, ..ConvLstmSpec::new(2, 3) };
        let layer = ConvLstmLayer::new(&mut store, "l", Group::EncoderTheta, spec, &mut r).unwrap();
        if peephole {
            for name in ["l.peep_ci", "l.peep_cf", "l.peep_co"] {
                let id = store.find(name).unwrap();
                let v = uniform(&mut r, store.get(id).shape(), -0.5, 0.5).to_vec();
                store.set_values(id, v).unwrap();
            }
        }
        let xs = uniform(&mut r, &[3, 4, 5, 2], -1.0, 1.0);
        let h0 = uniform(&mut r, &[4, 5, 3], -0.5, 0.5);
        let c0 = uniform(&mut r, &[4, 5, 3], -0.5, 0.5);
        let (err, _) = check_store(&mut store, |s| {
            let init = ConvLstmState::new(h0.clone(), c0.clone()).unwrap();
            let (out, fin) = layer.run_sequence(s, &xs, Some(&init)).unwrap();
            weighted_sum(&out, 1).add(&weighted_sum(&fin.cell, 2)).unwrap()
        }, 40, 0);
        record(&mut out, &format!("convlstm params peephole={peephole}"), err);
        let snapshot = store.clone();
        let err = check_inputs(&[xs.clone(), h0.clone(), c0.clone()], |v| {
            let init = ConvLstmState::new(v[1].clone(), v[2].clone()).unwrap();
            let (out, _) = layer.run_sequence(&snapshot, &v[0], Some(&init)).unwrap();
            weighted_sum(&out, 3)
        }, 40, 0);
        record(&mut out, &format!("convlstm inputs peephole={peephole}"), err);
    }
    out
}

pub fn tiny(t_in: usize) -> ModelConfig {
    ModelConfig {
        input_frames: t_in,
        encoder_widths: [2, 2, 2],
        decoder_widths: [2, 2, 2],
        ..ModelConfig::core()
    }
}

pub fn model_check(cfg: &ModelConfig, coords: usize) -> (f64, usize) {
    let model = DualUNet::<f64>::build(cfg).unwrap();
    let mut r = rng(8);
    let x = uniform(&mut r, &[cfg.input_frames, 8, 8, 8], 0.0, 1.0);
    let target = uniform(&mut r, &[cfg.output_frames, 8, 8, 8], 0.0, 1.0);
    let mut store = model.store.clone();
    check_store(&mut store, |s| {
        let mut dr = rng(9);
        let y = model.forward_with(s, &x, Mode::Train, &mut dr).unwrap();
        y.mse_loss(&target).unwrap()
    }, coords, 0)
}
