//! Composite building blocks: the NCAB stem, the four-branch SAEB
//! enhancement block, and the SFD decoder block.
//!
//! Each block is described by a small spec struct with two jobs: `defs`
//! registers the parameters and buffers the block owns (hierarchical names
//! like `stem.conv.w`), and `apply` replays the block on a tape through a
//! [`Session`]. Inside SAEB branches the inner order is conv -> ReLU -> BN,
//! and both SAEB and SFD end in ReLU(BN(concat) + BN(skip projection)).
//!
//! Convolutions in these blocks carry no bias: every path terminates in a
//! batch norm whose beta plays that role. Bias shows up only on layers with
//! nothing after them (classifier heads), which live in [`crate::net`].

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{ConvGeom, ConvTGeom, Mode, PoolGeom};
use crate::params::{BufferDef, Init, ParamDef, Session};
use crate::scalar::Scalar;
use crate::tensor::Axis;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

// ---- layer helpers: one `defs` + one `apply` per layer kind --------------

pub fn conv_defs(prefix: &str, geom: &ConvGeom, defs: &mut Vec<ParamDef>) {
    let fan_in = geom.in_ch * geom.kh * geom.kw;
    defs.push(ParamDef::new(
        format!("{prefix}.w"),
        geom.weight_shape(),
        Init::KaimingUniform { fan_in },
    ));
    if geom.has_bias {
        defs.push(ParamDef::new(format!("{prefix}.b"), vec![geom.out_ch], Init::Zeros));
    }
}

pub fn conv_apply<'t, E: Scalar>(
    sess: &Session<'t, '_, E>,
    prefix: &str,
    x: Var<'t, E>,
    geom: &ConvGeom,
) -> Result<Var<'t, E>> {
    let w = sess.param(&format!("{prefix}.w"))?;
    let b = if geom.has_bias {
        Some(sess.param(&format!("{prefix}.b"))?)
    } else {
        None
    };
    sess.tape().conv2d(x, w, b, geom)
}

pub fn convt_defs(prefix: &str, geom: &ConvTGeom, defs: &mut Vec<ParamDef>) {
    let fan_in = geom.in_ch * geom.kh * geom.kw;
    defs.push(ParamDef::new(
        format!("{prefix}.w"),
        geom.weight_shape(),
        Init::KaimingUniform { fan_in },
    ));
}

pub fn convt_apply<'t, E: Scalar>(
    sess: &Session<'t, '_, E>,
    prefix: &str,
    x: Var<'t, E>,
    geom: &ConvTGeom,
) -> Result<Var<'t, E>> {
    let w = sess.param(&format!("{prefix}.w"))?;
    sess.tape().conv_transpose2d(x, w, geom)
}

pub fn bn_defs(prefix: &str, ch: usize, defs: &mut Vec<ParamDef>, bufs: &mut Vec<BufferDef>) {
    defs.push(ParamDef::new(format!("{prefix}.gamma"), vec![ch], Init::Ones));
    defs.push(ParamDef::new(format!("{prefix}.beta"), vec![ch], Init::Zeros));
    bufs.push(BufferDef::new(format!("{prefix}.running_mean"), vec![ch], 0.0));
    bufs.push(BufferDef::new(format!("{prefix}.running_var"), vec![ch], 1.0));
}

/// Train mode normalizes with batch statistics and hands them to the session
/// for the running-stat update; eval mode reads the running buffers.
pub fn bn_apply<'t, E: Scalar>(
    sess: &Session<'t, '_, E>,
    prefix: &str,
    x: Var<'t, E>,
) -> Result<Var<'t, E>> {
    let gamma = sess.param(&format!("{prefix}.gamma"))?;
    let beta = sess.param(&format!("{prefix}.beta"))?;
    match sess.mode() {
        Mode::Train => {
            let (y, stats) = sess.tape().batchnorm2d_train(x, gamma, beta, BN_EPS)?;
            sess.note_bn_stats(prefix, stats);
            Ok(y)
        }
        Mode::Eval => {
            let rm = sess.buffer(&format!("{prefix}.running_mean"))?;
            let rv = sess.buffer(&format!("{prefix}.running_var"))?;
            sess.tape().batchnorm2d_eval(x, gamma, beta, &rm, &rv, BN_EPS)
        }
    }
}

pub fn linear_defs(prefix: &str, in_features: usize, out_features: usize, defs: &mut Vec<ParamDef>) {
    defs.push(ParamDef::new(
        format!("{prefix}.w"),
        vec![out_features, in_features],
        Init::KaimingUniform { fan_in: in_features },
    ));
    defs.push(ParamDef::new(format!("{prefix}.b"), vec![out_features], Init::Zeros));
}

pub fn linear_apply<'t, E: Scalar>(
    sess: &Session<'t, '_, E>,
    prefix: &str,
    x: Var<'t, E>,
) -> Result<Var<'t, E>> {
    let w = sess.param(&format!("{prefix}.w"))?;
    let b = sess.param(&format!("{prefix}.b"))?;
    sess.tape().linear(x, w, Some(b))
}

// ---- NCAB ----------------------------------------------------------------

/// The stem: conv 7x7 stride 2 pad 3, then ReLU, then BN (literally in that
/// order), then maxpool 3x3 stride 2 pad 1. Overall spatial reduction x4.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NcabSpec {
    pub in_ch: usize,
    pub out_ch: usize,
}

impl NcabSpec {
    pub fn conv_geom(&self) -> ConvGeom {
        ConvGeom::square(self.in_ch, self.out_ch, 7, 2, 3)
    }

    pub fn pool_geom() -> PoolGeom {
        PoolGeom::square(3, 2, 1)
    }

    pub fn defs(&self, prefix: &str, defs: &mut Vec<ParamDef>, bufs: &mut Vec<BufferDef>) {
        conv_defs(&format!("{prefix}.conv"), &self.conv_geom(), defs);
        bn_defs(&format!("{prefix}.bn"), self.out_ch, defs, bufs);
    }

    pub fn apply<'t, E: Scalar>(
        &self,
        sess: &Session<'t, '_, E>,
        prefix: &str,
        x: Var<'t, E>,
    ) -> Result<Var<'t, E>> {
        let y = conv_apply(sess, &format!("{prefix}.conv"), x, &self.conv_geom())?;
        let y = sess.tape().relu(y);
        let y = bn_apply(sess, &format!("{prefix}.bn"), y)?;
        sess.tape().maxpool2d(y, &Self::pool_geom())
    }
}

// ---- SAEB ----------------------------------------------------------------

/// The four-branch enhancement block.
///
/// With `c = out_ch / 4` per branch:
///   branch 1: conv1x1 (stride s)                          -> c
///   branch 2: conv1x1 -> ReLU -> BN -> conv3x3 p1 (s)     -> c
///   branch 3: conv1x1 -> ReLU -> BN -> conv5x5 p2 (s)     -> c
///   branch 4: maxpool3x3 p1 (stride s) -> conv1x1         -> c
/// output = ReLU(BN(concat) + BN(conv1x1 stride s on the input)).
/// The stride sits on each branch's spatial op and on the skip projection,
/// so all five paths agree on the output grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaebSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
}

impl SaebSpec {
    pub fn validate(&self) -> Result<()> {
        if self.out_ch % 4 != 0 || self.out_ch == 0 {
            return Err(Error::InvalidConfig(format!(
                "SAEB out_ch must be a positive multiple of 4, got {}",
                self.out_ch
            )));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::InvalidConfig(format!(
                "SAEB stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        Ok(())
    }

    pub fn branch_ch(&self) -> usize {
        self.out_ch / 4
    }

    fn geoms(&self) -> SaebGeoms {
        let c = self.branch_ch();
        let s = self.stride;
        SaebGeoms {
            b1: ConvGeom::square(self.in_ch, c, 1, s, 0),
            b2_reduce: ConvGeom::square(self.in_ch, c, 1, 1, 0),
            b2_conv: ConvGeom::square(c, c, 3, s, 1),
            b3_reduce: ConvGeom::square(self.in_ch, c, 1, 1, 0),
            b3_conv: ConvGeom::square(c, c, 5, s, 2),
            b4_pool: PoolGeom::square(3, s, 1),
            b4_conv: ConvGeom::square(self.in_ch, c, 1, 1, 0),
            skip: ConvGeom::square(self.in_ch, self.out_ch, 1, s, 0),
        }
    }

    pub fn defs(
        &self,
        prefix: &str,
        defs: &mut Vec<ParamDef>,
        bufs: &mut Vec<BufferDef>,
    ) -> Result<()> {
        self.validate()?;
        let g = self.geoms();
        let c = self.branch_ch();
        conv_defs(&format!("{prefix}.b1.conv"), &g.b1, defs);
        conv_defs(&format!("{prefix}.b2.reduce"), &g.b2_reduce, defs);
        bn_defs(&format!("{prefix}.b2.bn"), c, defs, bufs);
        conv_defs(&format!("{prefix}.b2.conv"), &g.b2_conv, defs);
        conv_defs(&format!("{prefix}.b3.reduce"), &g.b3_reduce, defs);
        bn_defs(&format!("{prefix}.b3.bn"), c, defs, bufs);
        conv_defs(&format!("{prefix}.b3.conv"), &g.b3_conv, defs);
        conv_defs(&format!("{prefix}.b4.conv"), &g.b4_conv, defs);
        bn_defs(&format!("{prefix}.concat_bn"), self.out_ch, defs, bufs);
        conv_defs(&format!("{prefix}.skip.conv"), &g.skip, defs);
        bn_defs(&format!("{prefix}.skip.bn"), self.out_ch, defs, bufs);
        Ok(())
    }

    pub fn apply<'t, E: Scalar>(
        &self,
        sess: &Session<'t, '_, E>,
        prefix: &str,
        x: Var<'t, E>,
    ) -> Result<Var<'t, E>> {
        self.validate()?;
        let g = self.geoms();
        let t = sess.tape();

        let b1 = conv_apply(sess, &format!("{prefix}.b1.conv"), x, &g.b1)?;

        let b2 = conv_apply(sess, &format!("{prefix}.b2.reduce"), x, &g.b2_reduce)?;
        let b2 = t.relu(b2);
        let b2 = bn_apply(sess, &format!("{prefix}.b2.bn"), b2)?;
        let b2 = conv_apply(sess, &format!("{prefix}.b2.conv"), b2, &g.b2_conv)?;

        let b3 = conv_apply(sess, &format!("{prefix}.b3.reduce"), x, &g.b3_reduce)?;
        let b3 = t.relu(b3);
        let b3 = bn_apply(sess, &format!("{prefix}.b3.bn"), b3)?;
        let b3 = conv_apply(sess, &format!("{prefix}.b3.conv"), b3, &g.b3_conv)?;

        let b4 = t.maxpool2d(x, &g.b4_pool)?;
        let b4 = conv_apply(sess, &format!("{prefix}.b4.conv"), b4, &g.b4_conv)?;

        let cat = t.concat(&[b1, b2, b3, b4], Axis(1))?;
        let cat = bn_apply(sess, &format!("{prefix}.concat_bn"), cat)?;

        let skip = conv_apply(sess, &format!("{prefix}.skip.conv"), x, &g.skip)?;
        let skip = bn_apply(sess, &format!("{prefix}.skip.bn"), skip)?;

        Ok(t.relu(t.add(cat, skip)?))
    }
}

struct SaebGeoms {
    b1: ConvGeom,
    b2_reduce: ConvGeom,
    b2_conv: ConvGeom,
    b3_reduce: ConvGeom,
    b3_conv: ConvGeom,
    b4_pool: PoolGeom,
    b4_conv: ConvGeom,
    skip: ConvGeom,
}

// ---- SFD -----------------------------------------------------------------

/// Decoder block: transposed conv x2 upsampling, channel concat with the
/// encoder skip feature, then the SAEB branch/skip equations over the
/// concatenated tensor at stride 1. The core *is* a [`SaebSpec`] with
/// `in_ch = out_ch + skip_ch`, which keeps the two blocks' math in one place.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SfdSpec {
    pub in_ch: usize,
    pub skip_ch: usize,
    pub out_ch: usize,
}

impl SfdSpec {
    pub fn up_geom(&self) -> ConvTGeom {
        ConvTGeom::square(self.in_ch, self.out_ch, 2, 2)
    }

    pub fn core(&self) -> SaebSpec {
        SaebSpec {
            in_ch: self.out_ch + self.skip_ch,
            out_ch: self.out_ch,
            stride: 1,
        }
    }

    pub fn defs(
        &self,
        prefix: &str,
        defs: &mut Vec<ParamDef>,
        bufs: &mut Vec<BufferDef>,
    ) -> Result<()> {
        convt_defs(&format!("{prefix}.up"), &self.up_geom(), defs);
        self.core().defs(&format!("{prefix}.core"), defs, bufs)
    }

    pub fn apply<'t, E: Scalar>(
        &self,
        sess: &Session<'t, '_, E>,
        prefix: &str,
        x: Var<'t, E>,
        skip: Var<'t, E>,
    ) -> Result<Var<'t, E>> {
        let up = convt_apply(sess, &format!("{prefix}.up"), x, &self.up_geom())?;
        let (us, ss) = (up.shape(), skip.shape());
        if us[2] != ss[2] || us[3] != ss[3] {
            return Err(Error::ShapeMismatch { op: "sfd", lhs: us, rhs: ss });
        }
        let cat = sess.tape().concat(&[up, skip], Axis(1))?;
        self.core().apply(sess, &format!("{prefix}.core"), cat)
    }
}
