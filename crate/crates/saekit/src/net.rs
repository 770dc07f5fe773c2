//! Network assembly: SAETCN for four-class classification and SAS-Net for
//! segmentation, both declared by small JSON-serializable configs.
//!
//! SAETCN is a serial stack: NCAB stem, then four SAEB modules (TriSAE x3,
//! QuadSAE x4, HexaSAE x6, Final SAE Fusion x3 — 16 blocks in all) walking
//! the channel ladder 64 -> 256 -> 512 -> 1024 -> 2048, then an adaptive
//! average pool and a two-layer classifier head. `enabled_modules` keeps a
//! prefix of that stack for ablation runs; `width_scale` divides every
//! channel count for desk-scale training.
//!
//! SAS-Net is a U-shaped pair: five stride-1 SAEBs (64..1024) with 2x2
//! max pools between them, and an ESIM decoder of four SFD blocks where
//! SFD_n upsamples the previous decoder feature and concatenates encoder
//! stage 5-n, finishing with a 1x1 conv to one logit map per class.
//!
//! Forwards emit logits; softmax/sigmoid belong to prediction and loss code.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::blocks::{self, NcabSpec, SaebSpec, SfdSpec};
use crate::error::{Error, Result};
use crate::nn::PoolGeom;
use crate::params::{BufferDef, ParamDef, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Canonical SAETCN module order; `enabled_modules` must be a prefix of it.
pub const SAETCN_MODULES: [&str; 5] = ["nca", "trisae", "quadsae", "hexasae", "fusion"];

fn default_num_classes() -> usize {
    4
}
fn default_width_scale() -> usize {
    1
}
fn default_enabled() -> Vec<String> {
    SAETCN_MODULES.iter().map(|s| s.to_string()).collect()
}

/// Classifier configuration. The default is the full 16-block network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaetcnConfig {
    pub num_classes: usize,
    /// Channel divisor: 1 is full width, 8 is the desk-scale 1/8 variant.
    pub width_scale: usize,
    /// Prefix of [`SAETCN_MODULES`] to build (ablation).
    pub enabled_modules: Vec<String>,
}

impl Default for SaetcnConfig {
    fn default() -> Self {
        SaetcnConfig {
            num_classes: default_num_classes(),
            width_scale: default_width_scale(),
            enabled_modules: default_enabled(),
        }
    }
}

/// Segmenter configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SasnetConfig {
    /// One logit map per class; trained against one-hot masks.
    pub num_out_channels: usize,
    pub width_scale: usize,
}

impl Default for SasnetConfig {
    fn default() -> Self {
        SasnetConfig { num_out_channels: 4, width_scale: 1 }
    }
}

fn check_width_scale(w: usize) -> Result<()> {
    // Every channel count in both ladders is a multiple of 64; requiring
    // 64/w >= 4 keeps all scaled SAEB/SFD outputs positive multiples of 4.
    if w == 0 || 64 % w != 0 || 64 / w < 4 {
        return Err(Error::InvalidConfig(format!(
            "width_scale must be one of 1, 2, 4, 8, 16; got {w}"
        )));
    }
    Ok(())
}

/// One SAEB module of the classifier: `count` blocks from `in_ch` to
/// `out_ch`, downsampling by `stride` in the first block.
#[derive(Debug, Clone, Copy)]
pub struct StagePlan {
    pub name: &'static str,
    pub count: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub first_stride: usize,
}

impl StagePlan {
    pub fn block(&self, i: usize) -> SaebSpec {
        SaebSpec {
            in_ch: if i == 0 { self.in_ch } else { self.out_ch },
            out_ch: self.out_ch,
            stride: if i == 0 { self.first_stride } else { 1 },
        }
    }
}

impl SaetcnConfig {
    pub fn validate(&self) -> Result<()> {
        check_width_scale(self.width_scale)?;
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.enabled_modules.is_empty() {
            return Err(Error::InvalidConfig("enabled_modules is empty".into()));
        }
        for (i, m) in self.enabled_modules.iter().enumerate() {
            if SAETCN_MODULES.get(i).map(|s| *s) != Some(m.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "enabled_modules must be a prefix of {SAETCN_MODULES:?}, found '{m}' at position {i}"
                )));
            }
        }
        Ok(())
    }

    fn scaled(&self, ch: usize) -> usize {
        ch / self.width_scale
    }

    pub fn stem(&self) -> NcabSpec {
        NcabSpec { in_ch: 3, out_ch: self.scaled(64) }
    }

    /// The enabled SAEB stages (the stem is separate).
    pub fn stages(&self) -> Vec<StagePlan> {
        let full = [
            StagePlan { name: "trisae", count: 3, in_ch: 64, out_ch: 256, first_stride: 1 },
            StagePlan { name: "quadsae", count: 4, in_ch: 256, out_ch: 512, first_stride: 2 },
            StagePlan { name: "hexasae", count: 6, in_ch: 512, out_ch: 1024, first_stride: 2 },
            StagePlan { name: "fusion", count: 3, in_ch: 1024, out_ch: 2048, first_stride: 2 },
        ];
        full.iter()
            .take(self.enabled_modules.len().saturating_sub(1))
            .map(|s| StagePlan {
                in_ch: self.scaled(s.in_ch),
                out_ch: self.scaled(s.out_ch),
                ..*s
            })
            .collect()
    }

    /// Channel count entering the head: the last enabled module's output.
    pub fn feature_channels(&self) -> usize {
        self.stages().last().map_or(self.scaled(64), |s| s.out_ch)
    }

    pub fn param_defs(&self) -> Result<(Vec<ParamDef>, Vec<BufferDef>)> {
        self.validate()?;
        let mut defs = Vec::new();
        let mut bufs = Vec::new();
        self.stem().defs("stem", &mut defs, &mut bufs);
        for stage in self.stages() {
            for i in 0..stage.count {
                stage.block(i).defs(&format!("{}.block{i}", stage.name), &mut defs, &mut bufs)?;
            }
        }
        let c = self.feature_channels();
        blocks::linear_defs("head.fc1", c, c, &mut defs);
        blocks::linear_defs("head.fc2", c, self.num_classes, &mut defs);
        Ok((defs, bufs))
    }

    pub fn init_params<E: Scalar>(&self, seed: u64) -> Result<ParamStore<E>> {
        let (defs, bufs) = self.param_defs()?;
        ParamStore::init(&defs, &bufs, seed)
    }
}

impl SasnetConfig {
    pub fn validate(&self) -> Result<()> {
        check_width_scale(self.width_scale)?;
        if self.num_out_channels == 0 {
            return Err(Error::InvalidConfig("num_out_channels must be positive".into()));
        }
        Ok(())
    }

    fn scaled(&self, ch: usize) -> usize {
        ch / self.width_scale
    }

    /// Encoder channel ladder (five stride-1 SAEBs).
    pub fn encoder_channels(&self) -> [usize; 5] {
        [64, 128, 256, 512, 1024].map(|c| self.scaled(c))
    }

    /// Decoder output ladder (four SFDs).
    pub fn decoder_channels(&self) -> [usize; 4] {
        [512, 256, 128, 64].map(|c| self.scaled(c))
    }

    pub fn encoder_block(&self, i: usize) -> SaebSpec {
        let ch = self.encoder_channels();
        SaebSpec {
            in_ch: if i == 0 { 3 } else { ch[i - 1] },
            out_ch: ch[i],
            stride: 1,
        }
    }

    /// SFD_n (0-based `i`): input from the previous decoder feature (or the
    /// encoder top), skip from encoder stage 4-i (0-based), per the ESIM
    /// routing rule.
    pub fn decoder_block(&self, i: usize) -> SfdSpec {
        let enc = self.encoder_channels();
        let dec = self.decoder_channels();
        SfdSpec {
            in_ch: if i == 0 { enc[4] } else { dec[i - 1] },
            skip_ch: enc[3 - i],
            out_ch: dec[i],
        }
    }

    pub fn final_conv_geom(&self) -> crate::nn::ConvGeom {
        crate::nn::ConvGeom::square(self.decoder_channels()[3], self.num_out_channels, 1, 1, 0)
            .with_bias()
    }

    pub fn param_defs(&self) -> Result<(Vec<ParamDef>, Vec<BufferDef>)> {
        self.validate()?;
        let mut defs = Vec::new();
        let mut bufs = Vec::new();
        for i in 0..5 {
            self.encoder_block(i).defs(&format!("enc.block{i}"), &mut defs, &mut bufs)?;
        }
        for i in 0..4 {
            self.decoder_block(i).defs(&format!("dec.sfd{i}"), &mut defs, &mut bufs)?;
        }
        blocks::conv_defs("final", &self.final_conv_geom(), &mut defs);
        Ok((defs, bufs))
    }

    pub fn init_params<E: Scalar>(&self, seed: u64) -> Result<ParamStore<E>> {
        let (defs, bufs) = self.param_defs()?;
        ParamStore::init(&defs, &bufs, seed)
    }
}

/// Either architecture plus its config, as stored in config files and
/// checkpoints. JSON form carries a discriminating `"arch"` key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetworkConfig {
    Saetcn(SaetcnConfig),
    Sasnet(SasnetConfig),
}

impl NetworkConfig {
    pub fn arch_name(&self) -> &'static str {
        match self {
            NetworkConfig::Saetcn(_) => "saetcn",
            NetworkConfig::Sasnet(_) => "sasnet",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NetworkConfig::Saetcn(c) => c.validate(),
            NetworkConfig::Sasnet(c) => c.validate(),
        }
    }

    pub fn to_json(&self) -> String {
        // Serialization cannot fail: both configs are plain data.
        let mut v = match self {
            NetworkConfig::Saetcn(c) => serde_json::to_value(c).unwrap(),
            NetworkConfig::Sasnet(c) => serde_json::to_value(c).unwrap(),
        };
        v.as_object_mut()
            .unwrap()
            .insert("arch".into(), serde_json::Value::String(self.arch_name().into()));
        serde_json::to_string_pretty(&v).unwrap()
    }

    /// Parses `{"arch": "saetcn"|"sasnet", ...config fields}`. Unknown fields
    /// are rejected; missing ones take defaults.
    pub fn from_json(text: &str) -> Result<NetworkConfig> {
        let mut v: serde_json::Value = serde_json::from_str(text)?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| Error::InvalidConfig("config must be a JSON object".into()))?;
        let arch = obj
            .remove("arch")
            .and_then(|a| a.as_str().map(String::from))
            .ok_or_else(|| Error::InvalidConfig("missing \"arch\" key".into()))?;
        let rest = serde_json::Value::Object(obj.clone());
        let cfg = match arch.as_str() {
            "saetcn" => NetworkConfig::Saetcn(serde_json::from_value(rest)?),
            "sasnet" => NetworkConfig::Sasnet(serde_json::from_value(rest)?),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown arch '{other}' (expected saetcn or sasnet)"
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn param_defs(&self) -> Result<(Vec<ParamDef>, Vec<BufferDef>)> {
        match self {
            NetworkConfig::Saetcn(c) => c.param_defs(),
            NetworkConfig::Sasnet(c) => c.param_defs(),
        }
    }

    pub fn init_params<E: Scalar>(&self, seed: u64) -> Result<ParamStore<E>> {
        match self {
            NetworkConfig::Saetcn(c) => c.init_params(seed),
            NetworkConfig::Sasnet(c) => c.init_params(seed),
        }
    }
}

fn expect_image<E: Scalar>(op: &'static str, shape: &[usize], min_hw: usize) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "expected N x 3 x H x W input".into(),
        });
    }
    if shape[2] < min_hw || shape[3] < min_hw {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("spatial extents must be at least {min_hw}"),
        });
    }
    Ok(())
}

/// SAETCN forward pass: N x 3 x H x W (H, W >= 32) to N x num_classes logits.
pub fn saetcn_forward<'t, E: Scalar>(
    cfg: &SaetcnConfig,
    sess: &Session<'t, '_, E>,
    x: Var<'t, E>,
) -> Result<Var<'t, E>> {
    cfg.validate()?;
    let shape = x.shape();
    expect_image::<E>("saetcn_forward", &shape, 32)?;
    let t = sess.tape();

    let mut h = cfg.stem().apply(sess, "stem", x)?;
    for stage in cfg.stages() {
        for i in 0..stage.count {
            h = stage.block(i).apply(sess, &format!("{}.block{i}", stage.name), h)?;
        }
    }

    let pooled = t.adaptive_avgpool_1x1(h)?;
    let c = cfg.feature_channels();
    let flat = t.reshape(pooled, vec![shape[0], c])?;
    let hid = blocks::linear_apply(sess, "head.fc1", flat)?;
    let hid = t.relu(hid);
    blocks::linear_apply(sess, "head.fc2", hid)
}

/// Per-stage activations captured by the instrumented SAS-Net forward.
pub struct SasnetTrace<E: Scalar> {
    /// Encoder stage outputs SAEB_1..SAEB_5 (before pooling).
    pub encoder: Vec<Tensor<E>>,
    /// Decoder outputs SFD_1..SFD_4.
    pub decoder: Vec<Tensor<E>>,
}

/// SAS-Net forward pass: N x 3 x H x W (H, W divisible by 16) to
/// N x num_out x H x W logit maps.
pub fn sasnet_forward<'t, E: Scalar>(
    cfg: &SasnetConfig,
    sess: &Session<'t, '_, E>,
    x: Var<'t, E>,
) -> Result<Var<'t, E>> {
    Ok(sasnet_forward_traced(cfg, sess, x, None)?.0)
}

/// Instrumented forward. `zero_skip_of` (1-based encoder stage) replaces that
/// stage's *skip feed into the decoder* with zeros while the encoder chain
/// itself is untouched: the wiring probe for the ESIM routing rule.
pub fn sasnet_forward_traced<'t, E: Scalar>(
    cfg: &SasnetConfig,
    sess: &Session<'t, '_, E>,
    x: Var<'t, E>,
    zero_skip_of: Option<usize>,
) -> Result<(Var<'t, E>, SasnetTrace<E>)> {
    cfg.validate()?;
    let shape = x.shape();
    expect_image::<E>("sasnet_forward", &shape, 16)?;
    if shape[2] % 16 != 0 || shape[3] % 16 != 0 {
        return Err(Error::InvalidShape {
            op: "sasnet_forward",
            shape,
            reason: "spatial extents must be divisible by 16".into(),
        });
    }
    let t = sess.tape();
    let pool = PoolGeom::square(2, 2, 0);

    // Encoder: SAEB_1..SAEB_5 with pools between consecutive blocks.
    let mut encoder: Vec<Var<'t, E>> = Vec::with_capacity(5);
    let mut h = x;
    for i in 0..5 {
        if i > 0 {
            h = t.maxpool2d(h, &pool)?;
        }
        h = cfg.encoder_block(i).apply(sess, &format!("enc.block{i}"), h)?;
        encoder.push(h);
    }

    // The decoder's view of each encoder stage; the probe zeroes one edge.
    let skip_feed: Vec<Var<'t, E>> = encoder
        .iter()
        .enumerate()
        .map(|(i, &e)| match zero_skip_of {
            Some(stage) if stage == i + 1 => t.scale(e, E::ZERO),
            _ => e,
        })
        .collect();

    // ESIM: SFD_n takes (previous decoder feature, encoder stage 5-n).
    let mut decoder: Vec<Var<'t, E>> = Vec::with_capacity(4);
    let mut d = skip_feed[4];
    for i in 0..4 {
        d = cfg.decoder_block(i).apply(
            sess,
            &format!("dec.sfd{i}"),
            d,
            skip_feed[3 - i],
        )?;
        decoder.push(d);
    }

    let logits = blocks::conv_apply(sess, "final", d, &cfg.final_conv_geom())?;
    let trace = SasnetTrace {
        encoder: encoder.iter().map(|v| v.value()).collect(),
        decoder: decoder.iter().map(|v| v.value()).collect(),
    };
    Ok((logits, trace))
}

/// Total learnable scalars, from the definitions alone.
pub fn count_params(cfg: &NetworkConfig) -> Result<usize> {
    let (defs, _) = cfg.param_defs()?;
    Ok(defs.iter().map(|d| d.shape.iter().product::<usize>()).sum())
}

/// One line of a model summary.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub name: String,
    pub kind: String,
    /// Output shape at the probe input, as C x H x W (batch omitted).
    pub out_shape: Vec<usize>,
    pub params: usize,
}

fn defs_scalar_count(defs: &[ParamDef]) -> usize {
    defs.iter().map(|d| d.shape.iter().product::<usize>()).sum()
}

fn saeb_row(name: String, spec: &SaebSpec, hw: (usize, usize)) -> Result<(SummaryRow, (usize, usize))> {
    let mut defs = Vec::new();
    let mut bufs = Vec::new();
    spec.defs("x", &mut defs, &mut bufs)?;
    let out_hw = (hw.0 / spec.stride, hw.1 / spec.stride);
    Ok((
        SummaryRow {
            name,
            kind: "SAEB".into(),
            out_shape: vec![spec.out_ch, out_hw.0, out_hw.1],
            params: defs_scalar_count(&defs),
        },
        out_hw,
    ))
}

/// Layer-by-layer table for a probe input of `probe_hw` pixels. Every block
/// is one row; the census tests lean on the `kind` column.
pub fn summarize(cfg: &NetworkConfig, probe_hw: (usize, usize)) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    match cfg {
        NetworkConfig::Saetcn(c) => {
            let stem = c.stem();
            let mut defs = Vec::new();
            let mut bufs = Vec::new();
            stem.defs("stem", &mut defs, &mut bufs);
            let mut hw = (probe_hw.0 / 4, probe_hw.1 / 4);
            rows.push(SummaryRow {
                name: "stem".into(),
                kind: "NCAB".into(),
                out_shape: vec![stem.out_ch, hw.0, hw.1],
                params: defs_scalar_count(&defs),
            });
            for stage in c.stages() {
                for i in 0..stage.count {
                    let (row, new_hw) =
                        saeb_row(format!("{}.block{i}", stage.name), &stage.block(i), hw)?;
                    hw = new_hw;
                    rows.push(row);
                }
            }
            let fc = c.feature_channels();
            rows.push(SummaryRow {
                name: "head.pool".into(),
                kind: "AvgPool".into(),
                out_shape: vec![fc, 1, 1],
                params: 0,
            });
            for (name, i, o) in [("head.fc1", fc, fc), ("head.fc2", fc, c.num_classes)] {
                let mut defs = Vec::new();
                blocks::linear_defs("x", i, o, &mut defs);
                rows.push(SummaryRow {
                    name: name.into(),
                    kind: "Linear".into(),
                    out_shape: vec![o],
                    params: defs_scalar_count(&defs),
                });
            }
        }
        NetworkConfig::Sasnet(c) => {
            let mut hw = probe_hw;
            let mut enc_hw = [hw; 5];
            for i in 0..5 {
                if i > 0 {
                    hw = (hw.0 / 2, hw.1 / 2);
                }
                enc_hw[i] = hw;
                let (row, _) = saeb_row(format!("enc.block{i}"), &c.encoder_block(i), hw)?;
                rows.push(row);
            }
            for i in 0..4 {
                let spec = c.decoder_block(i);
                let mut defs = Vec::new();
                let mut bufs = Vec::new();
                spec.defs("x", &mut defs, &mut bufs)?;
                hw = (hw.0 * 2, hw.1 * 2);
                rows.push(SummaryRow {
                    name: format!("dec.sfd{i}"),
                    kind: "SFD".into(),
                    out_shape: vec![spec.out_ch, hw.0, hw.1],
                    params: defs_scalar_count(&defs),
                });
            }
            let mut defs = Vec::new();
            blocks::conv_defs("x", &c.final_conv_geom(), &mut defs);
            rows.push(SummaryRow {
                name: "final".into(),
                kind: "Conv".into(),
                out_shape: vec![c.num_out_channels, hw.0, hw.1],
                params: defs_scalar_count(&defs),
            });
        }
    }
    Ok(rows)
}

/// Text rendering of a summary, plus the parameter total.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
    let mut out = String::new();
    out.push_str(&format!("{:<name_w$}  {:<7}  {:<18}  {:>12}\n", "layer", "kind", "out shape", "params"));
    let mut total = 0usize;
    for r in rows {
        let shape = r
            .out_shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        out.push_str(&format!("{:<name_w$}  {:<7}  {:<18}  {:>12}\n", r.name, r.kind, shape, r.params));
        total += r.params;
    }
    out.push_str(&format!("total parameters: {total}\n"));
    out
}
