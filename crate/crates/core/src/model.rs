//! The dual-encoding ConvLSTM U-Net.
//!
//! Data flow for an input movie `x: [T_in, H, W, 8]`:
//!
//! ```text
//!   E_theta: lstm1 @H ─pool─ lstm2 @H/2 ─pool─ lstm3 @H/4 ──┐ final h
//!   E_phi:   lstm1 @H ─pool─ lstm2 @H/2 ─pool─ lstm3 @H/4 ──┤ final h
//!                                                          repeat R, add
//!                                       [core] spatial dropout, 1x1x1 conv R -> T_out
//!   D_theta: lstm1 @H/4 ─up1─ lstm2 @H/2 ── lstm3 @H/2 ─up2─ sigmoid -> [T_out, H, W, 8]
//!            ^ skip: E_theta.lstm3   ^ skip: E_theta.lstm2
//! ```
//!
//! Skip connections pair each E_theta layer with the first decoder layer at
//! the same resolution. `E_theta.lstm1` runs at full resolution, where the
//! decoder has no ConvLSTM, so it has no skip partner.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::convlstm::{ConvLstmLayer, ConvLstmSpec, ConvLstmState};
use crate::error::{shape_err, Error, Result};
use crate::nn::{maxpool2, Conv3d1x1, ConvTranspose2d, Mode, SpatialDropout};
use crate::params::{Group, ParamStore};
use crate::rng;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Wider layers, with spatial dropout and the 1x1x1 conv head.
    Core,
    /// Narrower layers, no head: the combined encoding feeds the decoder.
    Extended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Decoder input is `O^{i-1} + O^j` (last T_dec encoder steps), zero init.
    Addition,
    /// Decoder layer first consumes the encoder sequence, then continues on
    /// its own input from the resulting states.
    TemporalConcat,
    /// Decoder layer starts from the encoder layer's final (h, c).
    HiddenCell,
}

fn default_kernel() -> usize {
    3
}

fn default_forget_bias() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_frames: usize,
    pub output_frames: usize,
    /// Length of the repeated encoding fed to the head (core) or decoder.
    pub repeat_frames: usize,
    pub channels: usize,
    pub encoder_widths: [usize; 3],
    pub decoder_widths: [usize; 3],
    pub skip_mode: SkipMode,
    pub dropout: f64,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub peephole: bool,
    #[serde(default = "default_forget_bias")]
    pub forget_bias: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn core() -> Self {
        ModelConfig {
            variant: Variant::Core,
            input_frames: 12,
            output_frames: 6,
            repeat_frames: 6,
            channels: 8,
            encoder_widths: [16, 28, 36],
            decoder_widths: [36, 28, 16],
            skip_mode: SkipMode::HiddenCell,
            dropout: 0.2,
            kernel: 3,
            peephole: false,
            forget_bias: 1.0,
            seed: 0,
        }
    }

    pub fn extended() -> Self {
        ModelConfig {
            variant: Variant::Extended,
            encoder_widths: [8, 16, 16],
            decoder_widths: [16, 16, 8],
            dropout: 0.0,
            ..Self::core()
        }
    }

    /// Decoder widths mirroring the encoder: `[f3, f2, f1]`.
    pub fn with_encoder_widths(mut self, widths: [usize; 3]) -> Self {
        self.encoder_widths = widths;
        self.decoder_widths = [widths[2], widths[1], widths[0]];
        self
    }

    pub fn with_skip_mode(mut self, mode: SkipMode) -> Self {
        self.skip_mode = mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn has_head(&self) -> bool {
        self.variant == Variant::Core
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.input_frames < 1 {
            return cfg("input_frames must be at least 1".into());
        }
        if ![6, 12].contains(&self.output_frames) {
            return cfg(format!("output_frames must be 6 or 12, got {}", self.output_frames));
        }
        if self.repeat_frames < 1 {
            return cfg("repeat_frames must be at least 1".into());
        }
        if self.channels < 1 {
            return cfg("channels must be at least 1".into());
        }
        if self.kernel < 1 || self.kernel.is_multiple_of(2) {
            return cfg(format!("kernel must be odd and positive, got {}", self.kernel));
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|&w| w == 0) {
            return cfg("layer widths must be positive".into());
        }
        let [_, f2, f3] = self.encoder_widths;
        let [g1, g2, _] = self.decoder_widths;
        if g1 != f3 || g2 != f2 {
            return cfg(format!(
                "skip-paired widths must match: decoder {:?} vs encoder {:?}",
                self.decoder_widths, self.encoder_widths
            ));
        }
        match self.variant {
            Variant::Core => {
                if !(0.0..1.0).contains(&self.dropout) {
                    return cfg(format!("dropout {} outside [0, 1)", self.dropout));
                }
            }
            Variant::Extended => {
                if self.repeat_frames != self.output_frames {
                    return cfg(
                        "extended variant has no 3D conv head, so repeat_frames must equal output_frames"
                            .into(),
                    );
                }
                if self.dropout != 0.0 {
                    return cfg("extended variant has no spatial dropout".into());
                }
            }
        }
        Ok(())
    }

    fn lstm_spec(&self, cin: usize, filters: usize) -> ConvLstmSpec {
        ConvLstmSpec {
            in_channels: cin,
            filters,
            kernel: (self.kernel, self.kernel),
            peephole: self.peephole,
            forget_bias: self.forget_bias,
        }
    }
}

/// Full output sequence and final state of one encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderRecord<E: Element> {
    pub outputs: Tensor<E>,
    pub state: ConvLstmState<E>,
}

/// Runs one decoder ConvLSTM layer with the selected skip connection.
/// `record` is the paired encoder layer; `None` means no skip.
pub fn apply_skip<E: Element>(
    mode: SkipMode,
    layer: &ConvLstmLayer,
    store: &ParamStore<E>,
    input: &Tensor<E>,
    record: Option<&EncoderRecord<E>>,
) -> Result<(Tensor<E>, ConvLstmState<E>)> {
    let Some(rec) = record else {
        return layer.run_sequence(store, input, None);
    };
    let (in_shape, enc_shape) = (input.shape(), rec.outputs.shape());
    if in_shape.len() != 4 || enc_shape.len() != 4 || in_shape[1..] != enc_shape[1..] {
        return Err(shape_err!(
            "skip source {:?} does not match decoder input {:?}",
            enc_shape,
            in_shape
        ));
    }
    if rec.state.hidden.shape()[2] != layer.filters() {
        return Err(shape_err!(
            "skip state has {} channels, decoder layer {} has {} filters",
            rec.state.hidden.shape()[2],
            layer.name,
            layer.filters()
        ));
    }
    match mode {
        SkipMode::Addition => {
            let (t_enc, t_dec) = (enc_shape[0], in_shape[0]);
            if t_enc < t_dec {
                return Err(shape_err!(
                    "addition skip needs at least {t_dec} encoder steps, got {t_enc}"
                ));
            }
            let recent = rec.outputs.slice(0, t_enc - t_dec, t_enc)?;
            layer.run_sequence(store, &input.add(&recent)?, None)
        }
        SkipMode::TemporalConcat => {
            let (_, primed) = layer.run_sequence(store, &rec.outputs, None)?;
            layer.run_sequence(store, input, Some(&primed))
        }
        SkipMode::HiddenCell => layer.run_sequence(store, input, Some(&rec.state)),
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    layers: [ConvLstmLayer; 3],
}

impl Encoder {
    fn build<E: Element>(
        store: &mut ParamStore<E>,
        group: Group,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let [f1, f2, f3] = cfg.encoder_widths;
        let specs = [
            cfg.lstm_spec(cfg.channels, f1),
            cfg.lstm_spec(f1, f2),
            cfg.lstm_spec(f2, f3),
        ];
        let mut built = Vec::with_capacity(3);
        for (k, spec) in specs.into_iter().enumerate() {
            let name = format!("{}.lstm{}", group.name(), k + 1);
            built.push(ConvLstmLayer::new(store, &name, group, spec, rng)?);
        }
        Ok(Encoder {
            layers: built.try_into().expect("three layers"),
        })
    }

    fn run<E: Element>(&self, store: &ParamStore<E>, x: &Tensor<E>) -> Result<Vec<EncoderRecord<E>>> {
        let mut records = Vec::with_capacity(3);
        let mut input = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let (outputs, state) = layer.run_sequence(store, &input, None)?;
            if k < 2 {
                input = maxpool2(&outputs)?;
            }
            records.push(EncoderRecord { outputs, state });
        }
        Ok(records)
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    layers: [ConvLstmLayer; 3],
    up: [ConvTranspose2d; 2],
}

#[derive(Debug, Clone)]
struct Head {
    dropout: SpatialDropout,
    conv: Conv3d1x1,
}

/// Layer inventory of a built network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerCensus {
    pub convlstm: usize,
    pub transposed_conv: usize,
    pub conv3d: usize,
    pub maxpool: usize,
    pub spatial_dropout: usize,
}

impl LayerCensus {
    pub fn convolutional(&self) -> usize {
        self.convlstm + self.transposed_conv + self.conv3d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamBreakdown {
    pub per_layer: Vec<(String, usize)>,
    pub per_group: BTreeMap<Group, usize>,
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
}

#[derive(Debug, Clone)]
pub struct DualUNet<E: Element> {
    pub config: ModelConfig,
    pub store: ParamStore<E>,
    enc_theta: Encoder,
    enc_phi: Encoder,
    decoder: Decoder,
    head: Option<Head>,
}

impl<E: Element> DualUNet<E> {
    /// Builds and initializes a network; identical configs (including seed)
    /// give bit-identical parameters.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let mut store = ParamStore::new();
        let mut r = rng::stream(cfg.seed, &[0x006d_6f64_656c]);
        let enc_theta = Encoder::build(&mut store, Group::EncoderTheta, &cfg, &mut r)?;
        let enc_phi = Encoder::build(&mut store, Group::EncoderPhi, &cfg, &mut r)?;
        let head = if cfg.has_head() {
            Some(Head {
                dropout: SpatialDropout::new(cfg.dropout)?,
                conv: Conv3d1x1::new(
                    &mut store,
                    "head.conv3d",
                    Group::Head,
                    cfg.repeat_frames,
                    cfg.output_frames,
                    &mut r,
                )?,
            })
        } else {
            None
        };
        let [f1, f2, f3] = cfg.encoder_widths;
        let [g1, g2, g3] = cfg.decoder_widths;
        debug_assert_eq!((g1, g2), (f3, f2));
        let _ = f1;
        let d = Group::DecoderTheta;
        let l1 = ConvLstmLayer::new(&mut store, "D_theta.lstm1", d, cfg.lstm_spec(f3, g1), &mut r)?;
        let up1 = ConvTranspose2d::new(&mut store, "D_theta.up1", d, g1, g2, &mut r)?;
        let l2 = ConvLstmLayer::new(&mut store, "D_theta.lstm2", d, cfg.lstm_spec(g2, g2), &mut r)?;
        let l3 = ConvLstmLayer::new(&mut store, "D_theta.lstm3", d, cfg.lstm_spec(g2, g3), &mut r)?;
        let up2 = ConvTranspose2d::new(&mut store, "D_theta.up2", d, g3, cfg.channels, &mut r)?;
        Ok(DualUNet {
            config: cfg,
            store,
            enc_theta,
            enc_phi,
            decoder: Decoder {
                layers: [l1, l2, l3],
                up: [up1, up2],
            },
            head,
        })
    }

    /// Same architecture and values with element type `F`.
    pub fn cast<F: Element>(&self) -> DualUNet<F> {
        DualUNet {
            config: self.config.clone(),
            store: self.store.cast(),
            enc_theta: self.enc_theta.clone(),
            enc_phi: self.enc_phi.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }

    pub fn forward(&self, x: &Tensor<E>, mode: Mode, rng: &mut impl Rng) -> Result<Tensor<E>> {
        self.forward_with(&self.store, x, mode, rng)
    }

    /// Forward pass reading parameters from `store`, which must have this
    /// model's layout (for example a perturbed copy of `self.store`).
    pub fn forward_with(
        &self,
        store: &ParamStore<E>,
        x: &Tensor<E>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Tensor<E>> {
        let cfg = &self.config;
        let &[t, h, w, c] = x.shape() else {
            return Err(shape_err!("model input must be [T, H, W, C], got {:?}", x.shape()));
        };
        if t != cfg.input_frames || c != cfg.channels {
            return Err(shape_err!(
                "model expects [{}, H, W, {}], got {:?}",
                cfg.input_frames,
                cfg.channels,
                x.shape()
            ));
        }
        if h < 4 || w < 4 {
            return Err(shape_err!("grid {h}x{w} is too small to pool twice"));
        }
        let theta = self.enc_theta.run(store, x)?;
        let phi = self.enc_phi.run(store, x)?;
        let reps = cfg.repeat_frames;
        let mut z = theta[2]
            .state
            .hidden
            .repeat(reps)?
            .add(&phi[2].state.hidden.repeat(reps)?)?;
        if let Some(head) = &self.head {
            z = head.dropout.forward(&z, mode, rng)?;
            z = head.conv.forward(store, &z)?;
        }
        let mode_skip = cfg.skip_mode;
        let [l1, l2, l3] = &self.decoder.layers;
        let [up1, up2] = &self.decoder.up;
        let (d1, _) = apply_skip(mode_skip, l1, store, &z, Some(&theta[2]))?;
        let mid = theta[1].outputs.shape();
        let u1 = up1.forward(store, &d1, (mid[1], mid[2]))?;
        let (d2, _) = apply_skip(mode_skip, l2, store, &u1, Some(&theta[1]))?;
        let (d3, _) = apply_skip(mode_skip, l3, store, &d2, None)?;
        Ok(up2.forward(store, &d3, (h, w))?.sigmoid())
    }

    /// Eval-mode forward without graph recording.
    pub fn predict(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut unused = rng::stream(0, &[]);
        crate::tensor::no_grad(|| self.forward(x, Mode::Eval, &mut unused))
    }

    pub fn census(&self) -> LayerCensus {
        LayerCensus {
            convlstm: self.enc_theta.layers.len() + self.enc_phi.layers.len() + self.decoder.layers.len(),
            transposed_conv: self.decoder.up.len(),
            conv3d: usize::from(self.head.is_some()),
            maxpool: 4,
            spatial_dropout: usize::from(self.head.is_some()),
        }
    }

    pub fn count_parameters(&self) -> ParamBreakdown {
        let mut per_layer: Vec<(String, usize)> = Vec::new();
        let mut per_group = BTreeMap::new();
        for e in self.store.entries() {
            let layer = e.name.rsplit_once('.').map_or(e.name.as_str(), |(l, _)| l);
            match per_layer.last_mut() {
                Some((name, n)) if name == layer => *n += e.value.numel(),
                _ => per_layer.push((layer.to_string(), e.value.numel())),
            }
            *per_group.entry(e.group).or_insert(0) += e.value.numel();
        }
        let total = self.store.total_count();
        let trainable = self.store.trainable_count();
        ParamBreakdown {
            per_layer,
            per_group,
            total,
            trainable,
            frozen: total - trainable,
        }
    }

    pub fn groups(&self) -> Vec<Group> {
        let mut g = vec![Group::EncoderTheta, Group::EncoderPhi, Group::DecoderTheta];
        if self.head.is_some() {
            g.push(Group::Head);
        }
        g
    }

    pub fn freeze(&mut self, group: Group) -> Result<()> {
        if !self.groups().contains(&group) {
            return Err(Error::Config(format!("model has no parameter group `{group}`")));
        }
        self.store.freeze(group);
        Ok(())
    }

    pub fn freeze_named(&mut self, group: &str) -> Result<()> {
        self.freeze(group.parse()?)
    }

    pub fn decoder_cell_steps(&self) -> u64 {
        self.decoder.layers.iter().map(|l| l.steps()).sum()
    }

    pub fn encoder_cell_steps(&self) -> u64 {
        self.enc_theta
            .layers
            .iter()
            .chain(&self.enc_phi.layers)
            .map(|l| l.steps())
            .sum()
    }

    pub fn reset_step_counters(&self) {
        self.enc_theta
            .layers
            .iter()
            .chain(&self.enc_phi.layers)
            .chain(&self.decoder.layers)
            .for_each(|l| l.reset_steps());
    }

    pub fn decoder_layer(&self, k: usize) -> &ConvLstmLayer {
        &self.decoder.layers[k]
    }

    pub fn encoder_layer(&self, group: Group, k: usize) -> Option<&ConvLstmLayer> {
        match group {
            Group::EncoderTheta => self.enc_theta.layers.get(k),
            Group::EncoderPhi => self.enc_phi.layers.get(k),
            _ => None,
        }
    }

    /// Runs E_theta alone and returns its per-layer records.
    pub fn encode_theta(&self, x: &Tensor<E>) -> Result<Vec<EncoderRecord<E>>> {
        self.enc_theta.run(&self.store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_frames: 3,
            encoder_widths: [2, 2, 2],
            decoder_widths: [2, 2, 2],
            ..ModelConfig::core()
        }
    }

    #[test]
    fn default_parameter_bands() {
        let core = DualUNet::<f32>::build(&ModelConfig::core()).unwrap();
        let total = core.count_parameters().total;
        assert!((400_000..500_000).contains(&total), "core {total}");
        let ext = DualUNet::<f32>::build(&ModelConfig::extended()).unwrap();
        let total = ext.count_parameters().total;
        assert!((100_000..=140_000).contains(&total), "extended {total}");
    }

    #[test]
    fn extended_is_narrower() {
        let (c, e) = (ModelConfig::core(), ModelConfig::extended());
        for k in 0..3 {
            assert!(e.encoder_widths[k] < c.encoder_widths[k]);
            assert!(e.decoder_widths[k] < c.decoder_widths[k]);
        }
    }

    #[test]
    fn config_errors() {
        let bad = ModelConfig { decoder_widths: [8, 8, 8], ..ModelConfig::core() };
        assert!(matches!(DualUNet::<f32>::build(&bad), Err(Error::Config(_))));
        let bad = ModelConfig { repeat_frames: 12, ..ModelConfig::extended() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { output_frames: 7, ..ModelConfig::core() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { dropout: 0.2, ..ModelConfig::extended() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { input_frames: 0, ..ModelConfig::core() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn census() {
        let core = DualUNet::<f32>::build(&tiny()).unwrap().census();
        assert_eq!((core.convlstm, core.transposed_conv, core.conv3d), (9, 2, 1));
        assert_eq!(core.convolutional(), 12);
        let ext = ModelConfig { variant: Variant::Extended, dropout: 0.0, ..tiny() };
        let ext = DualUNet::<f32>::build(&ext).unwrap().census();
        assert_eq!((ext.convlstm, ext.transposed_conv, ext.conv3d), (9, 2, 0));
    }

    #[test]
    fn forward_shape_and_range() {
        let m = DualUNet::<f32>::build(&tiny()).unwrap();
        let x = Tensor::full(&[3, 9, 7, 8], 0.3);
        let y = m.predict(&x).unwrap();
        assert_eq!(y.shape(), &[6, 9, 7, 8]);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(matches!(m.predict(&Tensor::zeros(&[3, 3, 8, 8])), Err(Error::Shape(_))));
        assert!(matches!(m.predict(&Tensor::zeros(&[4, 8, 8, 8])), Err(Error::Shape(_))));
    }

    #[test]
    fn freeze_unknown_group() {
        let ext = ModelConfig { variant: Variant::Extended, dropout: 0.0, ..tiny() };
        let mut m = DualUNet::<f32>::build(&ext).unwrap();
        assert!(matches!(m.freeze(Group::Head), Err(Error::Config(_))));
        assert!(matches!(m.freeze_named("E_omega"), Err(Error::Config(_))));
        let phi = m.count_parameters().per_group[&Group::EncoderPhi];
        m.freeze_named("E_phi").unwrap();
        let b = m.count_parameters();
        assert_eq!(b.trainable, b.total - phi);
    }

    #[test]
    fn per_layer_counts_sum() {
        let m = DualUNet::<f32>::build(&ModelConfig::core()).unwrap();
        let b = m.count_parameters();
        assert_eq!(b.per_layer.iter().map(|(_, n)| n).sum::<usize>(), b.total);
        assert_eq!(b.per_layer.len(), 9 + 2 + 1);
        let l1 = b.per_layer.iter().find(|(n, _)| n == "E_theta.lstm1").unwrap().1;
        assert_eq!(l1, 4 * (9 * (8 + 16) * 16 + 16));
    }
}
