//! Versioned binary checkpoints: network spec, parameters (including norm
//! state), momentum buffers, step/epoch counters, and the exact RNG
//! position. All floats are stored as little-endian f64 raw bits, so a
//! save/load round trip is bit-exact and a resumed run reproduces the
//! uninterrupted one.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::net::{FeatureShape, LayerKind, LayerParams, NetworkSpec, ParamSet};
use crate::norm::{NormState, NormVariant};
use crate::rng::{RngState, Stream};
use crate::train::{LayerVelocity, MomentumState, TrainConfig, Trainer};
use crate::Mat;

const MAGIC: &[u8; 4] = b"ONET";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not an ONET checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    BadVersion(u32),
    #[error("truncated or corrupt checkpoint at byte {0}")]
    Truncated(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Complete resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: NetworkSpec,
    pub params: ParamSet,
    pub momentum: MomentumState,
    pub step: u64,
    pub epoch: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            net: t.net.clone(),
            params: t.params.clone(),
            momentum: t.momentum.clone(),
            step: t.step as u64,
            epoch: t.epoch as u64,
            rng: t.rng.state(),
        }
    }

    /// Rebuilds a trainer at the exact checkpointed position. Hyperparameters
    /// come from `config`; state (parameters, velocities, counters, RNG
    /// position) comes from the checkpoint.
    pub fn into_trainer(self, config: TrainConfig) -> Result<Trainer, crate::train::TrainError> {
        let mut momentum = self.momentum;
        momentum.momentum = config.momentum;
        momentum.weight_decay = config.weight_decay;
        let mut trainer = Trainer::new(self.net, self.params, config)?;
        trainer.momentum = momentum;
        trainer.step = self.step as usize;
        trainer.epoch = self.epoch as usize;
        trainer.rng = Stream::restore(&self.rng);
        Ok(trainer)
    }
}

// --- encoding -------------------------------------------------------------

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }
    fn mat(&mut self, m: &Mat) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        for &v in m.data() {
            self.f64(v);
        }
    }
    fn shape(&mut self, s: FeatureShape) {
        match s {
            FeatureShape::Flat(n) => {
                self.u8(0);
                self.u64(n as u64);
            }
            FeatureShape::Image {
                channels,
                height,
                width,
            } => {
                self.u8(1);
                self.u64(channels as u64);
                self.u64(height as u64);
                self.u64(width as u64);
            }
        }
    }
    fn variant(&mut self, v: NormVariant) {
        match v {
            NormVariant::Bn => self.u8(0),
            NormVariant::Dbn => self.u8(1),
            NormVariant::Bbn { epsilon_tilde } => {
                self.u8(2);
                self.f64(epsilon_tilde);
            }
        }
    }
    fn kind(&mut self, k: LayerKind) {
        match k {
            LayerKind::Dense { units } => {
                self.u8(0);
                self.u64(units as u64);
            }
            LayerKind::ConvAsMatrix {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
                stride,
                pad,
            } => {
                self.u8(1);
                for v in [out_channels, in_channels, kernel_h, kernel_w, stride, pad] {
                    self.u64(v as u64);
                }
            }
            LayerKind::Relu => self.u8(2),
            LayerKind::MaxPool { window, stride } => {
                self.u8(3);
                self.u64(window as u64);
                self.u64(stride as u64);
            }
            LayerKind::Norm => self.u8(4),
            LayerKind::SoftmaxCe => self.u8(5),
        }
    }
    fn norm_state(&mut self, s: &NormState) {
        self.variant(s.variant);
        self.u64(s.spatial as u64);
        self.f64s(&s.gamma);
        self.f64s(&s.beta);
        self.f64s(&s.running_mean);
        self.f64s(&s.running_std);
        self.f64(s.upsilon_bar);
        self.f64(s.phi_bar);
    }
}

struct Dec<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(CheckpointError::Truncated(self.pos));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize_(&mut self) -> Result<usize, CheckpointError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| CheckpointError::Corrupt(format!("count {v} overflows")))
    }
    fn f64s(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.usize_()?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
    fn mat(&mut self) -> Result<Mat, CheckpointError> {
        let rows = self.usize_()?;
        let cols = self.usize_()?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64()?);
        }
        Ok(Mat::from_vec(rows, cols, data))
    }
    fn shape(&mut self) -> Result<FeatureShape, CheckpointError> {
        match self.u8()? {
            0 => Ok(FeatureShape::Flat(self.usize_()?)),
            1 => Ok(FeatureShape::Image {
                channels: self.usize_()?,
                height: self.usize_()?,
                width: self.usize_()?,
            }),
            t => Err(CheckpointError::Corrupt(format!("shape tag {t}"))),
        }
    }
    fn variant(&mut self) -> Result<NormVariant, CheckpointError> {
        match self.u8()? {
            0 => Ok(NormVariant::Bn),
            1 => Ok(NormVariant::Dbn),
            2 => Ok(NormVariant::Bbn {
                epsilon_tilde: self.f64()?,
            }),
            t => Err(CheckpointError::Corrupt(format!("norm variant tag {t}"))),
        }
    }
    fn kind(&mut self) -> Result<LayerKind, CheckpointError> {
        Ok(match self.u8()? {
            0 => LayerKind::Dense {
                units: self.usize_()?,
            },
            1 => LayerKind::ConvAsMatrix {
                out_channels: self.usize_()?,
                in_channels: self.usize_()?,
                kernel_h: self.usize_()?,
                kernel_w: self.usize_()?,
                stride: self.usize_()?,
                pad: self.usize_()?,
            },
            2 => LayerKind::Relu,
            3 => LayerKind::MaxPool {
                window: self.usize_()?,
                stride: self.usize_()?,
            },
            4 => LayerKind::Norm,
            5 => LayerKind::SoftmaxCe,
            t => return Err(CheckpointError::Corrupt(format!("layer kind tag {t}"))),
        })
    }
    fn norm_state(&mut self) -> Result<NormState, CheckpointError> {
        Ok(NormState {
            variant: self.variant()?,
            spatial: self.usize_()?,
            gamma: self.f64s()?,
            beta: self.f64s()?,
            running_mean: self.f64s()?,
            running_std: self.f64s()?,
            upsilon_bar: self.f64()?,
            phi_bar: self.f64()?,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut e = Enc(Vec::new());
    e.0.extend_from_slice(MAGIC);
    e.u32(VERSION);

    // Network spec.
    e.shape(ckpt.net.input_shape);
    e.variant(ckpt.net.norm_variant);
    e.u64(ckpt.net.layers.len() as u64);
    for layer in &ckpt.net.layers {
        e.kind(layer.kind);
        e.shape(layer.in_shape);
        e.shape(layer.out_shape);
    }

    // Parameters.
    for p in &ckpt.params.layers {
        match p {
            LayerParams::Stateless => e.u8(0),
            LayerParams::Weight { w, b } => {
                e.u8(1);
                e.mat(w);
                e.f64s(b);
            }
            LayerParams::Norm(s) => {
                e.u8(2);
                e.norm_state(s);
            }
        }
    }

    // Momentum.
    e.f64(ckpt.momentum.momentum);
    e.f64(ckpt.momentum.weight_decay);
    for v in &ckpt.momentum.layers {
        match v {
            LayerVelocity::Stateless => e.u8(0),
            LayerVelocity::Weight { vw, vb } => {
                e.u8(1);
                e.mat(vw);
                e.f64s(vb);
            }
            LayerVelocity::Norm {
                v_gamma,
                v_beta,
                v_upsilon_bar,
            } => {
                e.u8(2);
                e.f64s(v_gamma);
                e.f64s(v_beta);
                e.f64(*v_upsilon_bar);
            }
        }
    }

    e.u64(ckpt.step);
    e.u64(ckpt.epoch);
    e.u64(ckpt.rng.seed);
    e.u64(ckpt.rng.stream);
    e.u128(ckpt.rng.word_pos);

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, &e.0)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let data = fs::read(path)?;
    let mut d = Dec {
        data: &data,
        pos: 0,
    };
    if d.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = d.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }

    let input_shape = d.shape()?;
    let norm_variant = d.variant()?;
    let n_layers = d.usize_()?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = d.kind()?;
        let in_shape = d.shape()?;
        let out_shape = d.shape()?;
        layers.push(crate::net::LayerSpec {
            kind,
            in_shape,
            out_shape,
        });
    }
    let net = NetworkSpec {
        input_shape,
        norm_variant,
        layers,
    };

    let mut params = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        params.push(match d.u8()? {
            0 => LayerParams::Stateless,
            1 => LayerParams::Weight {
                w: d.mat()?,
                b: d.f64s()?,
            },
            2 => LayerParams::Norm(d.norm_state()?),
            t => return Err(CheckpointError::Corrupt(format!("param tag {t}"))),
        });
    }

    let momentum_coef = d.f64()?;
    let weight_decay = d.f64()?;
    let mut velocities = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        velocities.push(match d.u8()? {
            0 => LayerVelocity::Stateless,
            1 => LayerVelocity::Weight {
                vw: d.mat()?,
                vb: d.f64s()?,
            },
            2 => LayerVelocity::Norm {
                v_gamma: d.f64s()?,
                v_beta: d.f64s()?,
                v_upsilon_bar: d.f64()?,
            },
            t => return Err(CheckpointError::Corrupt(format!("velocity tag {t}"))),
        });
    }

    let step = d.u64()?;
    let epoch = d.u64()?;
    let rng = RngState {
        seed: d.u64()?,
        stream: d.u64()?,
        word_pos: d.u128()?,
    };
    if d.pos != data.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            data.len() - d.pos
        )));
    }

    Ok(Checkpoint {
        net,
        params: ParamSet { layers: params },
        momentum: MomentumState {
            layers: velocities,
            momentum: momentum_coef,
            weight_decay,
        },
        step,
        epoch,
        rng,
    })
}
