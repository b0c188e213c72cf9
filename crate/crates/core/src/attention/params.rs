use std::collections::BTreeMap;

use crate::error::{EgaError, Result};
use crate::rig::RigConfig;
use crate::tensor::{derive_seed, seeded_init, Matrix};

/// Per-channel affine parameters of a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl NormParams {
    pub fn identity(channels: usize) -> Self {
        Self { gain: vec![1.0; channels], bias: vec![0.0; channels] }
    }
}

/// Learnable state of one attention block (one view at one scale).
#[derive(Debug, Clone, PartialEq)]
pub struct EgaParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    /// `k_s × L` key projection; present iff the scale is projected.
    pub p_k: Option<Matrix>,
    pub p_v: Option<Matrix>,
    pub query_norm: NormParams,
    pub reference_norm: NormParams,
}

/// Slot indices used when deriving per-matrix seeds.
const SLOT_Q: u64 = 0;
const SLOT_K: u64 = 1;
const SLOT_V: u64 = 2;
const SLOT_O: u64 = 3;
const SLOT_PK: u64 = 4;
const SLOT_PV: u64 = 5;

impl EgaParams {
    /// Fan-in scaled initialization: `W` uniform in ±1/√c, `P` in ±1/√L,
    /// norms at identity.
    ///
    /// `projection` is `(k_s, L)` for a projected scale.
    pub fn init(channels: usize, projection: Option<(usize, usize)>, seed: u64) -> Self {
        let w = 1.0 / (channels as f64).sqrt();
        let mut p = Self {
            w_q: seeded_init(channels, channels, derive_seed(seed, &[SLOT_Q]), w),
            w_k: seeded_init(channels, channels, derive_seed(seed, &[SLOT_K]), w),
            w_v: seeded_init(channels, channels, derive_seed(seed, &[SLOT_V]), w),
            w_o: seeded_init(channels, channels, derive_seed(seed, &[SLOT_O]), w),
            p_k: None,
            p_v: None,
            query_norm: NormParams::identity(channels),
            reference_norm: NormParams::identity(channels),
        };
        if let Some((k, len)) = projection {
            let (pk, pv) = init_projection(k, len, seed);
            p.p_k = Some(pk);
            p.p_v = Some(pv);
        }
        p
    }

    /// Every entry, norm parameters included, uniform in `[-scale, scale]`.
    pub fn random(channels: usize, projection: Option<(usize, usize)>, seed: u64, scale: f64) -> Self {
        let mut p = Self::init(channels, None, seed);
        for (slot, m) in [&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.w_o].into_iter().enumerate() {
            *m = seeded_init(channels, channels, derive_seed(seed, &[10, slot as u64]), scale);
        }
        if let Some((k, len)) = projection {
            p.p_k = Some(seeded_init(k, len, derive_seed(seed, &[10, SLOT_PK]), scale));
            p.p_v = Some(seeded_init(k, len, derive_seed(seed, &[10, SLOT_PV]), scale));
        }
        let vec = |slot: u64| seeded_init(1, channels, derive_seed(seed, &[20, slot]), scale).into_data();
        p.query_norm = NormParams { gain: vec(0), bias: vec(1) };
        p.reference_norm = NormParams { gain: vec(2), bias: vec(3) };
        p
    }

    pub fn channels(&self) -> usize {
        self.w_q.rows()
    }

    /// `(k_s, L)` when projected.
    pub fn projection_shape(&self) -> Option<(usize, usize)> {
        self.p_k.as_ref().map(Matrix::shape)
    }

    /// Checks shapes against a channel width and an expected projection.
    pub fn validate(&self, channels: usize, projection: Option<(usize, usize)>) -> Result<()> {
        for (name, m) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)] {
            if m.shape() != (channels, channels) {
                return Err(EgaError::shape(name, m.shape(), (channels, channels)));
            }
            if !m.is_finite() {
                return Err(EgaError::Input(format!("{name} holds non-finite values")));
            }
        }
        for norm in [&self.query_norm, &self.reference_norm] {
            if norm.gain.len() != channels || norm.bias.len() != channels {
                return Err(EgaError::shape("params.norm", (1, norm.gain.len()), (1, channels)));
            }
        }
        match (&self.p_k, &self.p_v, projection) {
            (None, None, None) => Ok(()),
            (Some(pk), Some(pv), Some(shape)) => {
                if pk.shape() != shape {
                    return Err(EgaError::shape("params.p_k", pk.shape(), shape));
                }
                if pv.shape() != shape {
                    return Err(EgaError::shape("params.p_v", pv.shape(), shape));
                }
                Ok(())
            }
            (Some(_), Some(_), None) => {
                Err(EgaError::Config("projection matrices given for an unprojected scale".into()))
            }
            (None, None, Some(_)) => {
                Err(EgaError::Config("projected scale is missing P_k/P_v".into()))
            }
            _ => Err(EgaError::Config("P_k and P_v must both be present or both absent".into())),
        }
    }

    /// All parameters as named `rows × cols` matrices; norm vectors are `1 × c`.
    pub fn named_matrices(&self) -> Vec<(&'static str, Matrix)> {
        let c = self.channels();
        let row = |v: &Vec<f64>| Matrix::new(1, c, v.clone()).expect("norm vector length");
        let mut out = vec![
            ("w_q", self.w_q.clone()),
            ("w_k", self.w_k.clone()),
            ("w_v", self.w_v.clone()),
            ("w_o", self.w_o.clone()),
        ];
        if let (Some(pk), Some(pv)) = (&self.p_k, &self.p_v) {
            out.push(("p_k", pk.clone()));
            out.push(("p_v", pv.clone()));
        }
        out.extend([
            ("query_norm.gain", row(&self.query_norm.gain)),
            ("query_norm.bias", row(&self.query_norm.bias)),
            ("reference_norm.gain", row(&self.reference_norm.gain)),
            ("reference_norm.bias", row(&self.reference_norm.bias)),
        ]);
        out
    }

    /// Inverse of [`named_matrices`](Self::named_matrices) for one entry.
    pub fn set_named(&mut self, name: &str, m: Matrix) -> Result<()> {
        let vec_of = |m: Matrix| -> Result<Vec<f64>> {
            if m.rows() != 1 {
                return Err(EgaError::shape("norm vector", m.shape(), (1, m.cols())));
            }
            Ok(m.into_data())
        };
        match name {
            "w_q" => self.w_q = m,
            "w_k" => self.w_k = m,
            "w_v" => self.w_v = m,
            "w_o" => self.w_o = m,
            "p_k" => self.p_k = Some(m),
            "p_v" => self.p_v = Some(m),
            "query_norm.gain" => self.query_norm.gain = vec_of(m)?,
            "query_norm.bias" => self.query_norm.bias = vec_of(m)?,
            "reference_norm.gain" => self.reference_norm.gain = vec_of(m)?,
            "reference_norm.bias" => self.reference_norm.bias = vec_of(m)?,
            other => return Err(EgaError::Format(format!("unknown parameter '{other}'"))),
        }
        Ok(())
    }
}

fn init_projection(k: usize, len: usize, seed: u64) -> (Matrix, Matrix) {
    let p = 1.0 / (len as f64).sqrt();
    (
        seeded_init(k, len, derive_seed(seed, &[SLOT_PK]), p),
        seeded_init(k, len, derive_seed(seed, &[SLOT_PV]), p),
    )
}

/// Parameters for every (view, scale) of a rig.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub(crate) blocks: BTreeMap<(usize, usize), EgaParams>,
    pub(crate) shared_projections: bool,
}

impl ParamStore {
    pub fn init(config: &RigConfig, seed: u64) -> Self {
        let mut blocks = BTreeMap::new();
        for (scale, sc) in config.scales.iter().enumerate() {
            let projection = sc.projection_dim.map(|k| (k, config.reference_len(scale)));
            let shared = match (config.share_projections, projection) {
                (true, Some((k, len))) => {
                    Some(init_projection(k, len, derive_seed(seed, &[u64::MAX, scale as u64])))
                }
                _ => None,
            };
            for view in 0..config.num_cameras {
                let block_seed = derive_seed(seed, &[view as u64, scale as u64]);
                let mut p = EgaParams::init(
                    config.channels,
                    if shared.is_some() { None } else { projection },
                    block_seed,
                );
                if let Some((pk, pv)) = &shared {
                    p.p_k = Some(pk.clone());
                    p.p_v = Some(pv.clone());
                }
                blocks.insert((view, scale), p);
            }
        }
        Self { blocks, shared_projections: config.share_projections }
    }

    pub fn from_blocks(blocks: BTreeMap<(usize, usize), EgaParams>, shared_projections: bool) -> Self {
        Self { blocks, shared_projections }
    }

    pub fn get(&self, view: usize, scale: usize) -> Result<&EgaParams> {
        self.blocks
            .get(&(view, scale))
            .ok_or_else(|| EgaError::Input(format!("no parameters for view {view}, scale {scale}")))
    }

    pub fn get_mut(&mut self, view: usize, scale: usize) -> Option<&mut EgaParams> {
        self.blocks.get_mut(&(view, scale))
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&(usize, usize), &EgaParams)> {
        self.blocks.iter()
    }

    pub fn shared_projections(&self) -> bool {
        self.shared_projections
    }

    /// Distinct learnable scalars; shared projections are counted once per scale.
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        let mut seen_scales = std::collections::BTreeSet::new();
        for (&(_, scale), p) in &self.blocks {
            for (name, m) in p.named_matrices() {
                let is_projection = name == "p_k" || name == "p_v";
                if is_projection && self.shared_projections && !seen_scales.insert((scale, name)) {
                    continue;
                }
                total += m.rows() * m.cols();
            }
        }
        total
    }
}
