//! Camera rig description, feature collections, and reference stacking.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{EgaError, Result};
use crate::tensor::{concat_rows, derive_seed, seeded_init, Matrix};

/// Default channel width of the attention stage for synthetic runs.
pub const DEFAULT_CHANNELS: usize = 64;
/// Attention heads used by every preset.
pub const DEFAULT_HEADS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub height: usize,
    pub width: usize,
    /// Fixed key/value length after projection; `None` runs unprojected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_dim: Option<usize>,
}

impl ScaleConfig {
    pub fn new(height: usize, width: usize, projection_dim: Option<usize>) -> Self {
        Self { height, width, projection_dim }
    }

    /// Flattened spatial positions `H·W`.
    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigConfig {
    pub name: String,
    pub num_cameras: usize,
    /// Ordered neighbor list per camera; this order fixes the row layout of
    /// every reference stack.
    pub neighbors: Vec<Vec<usize>>,
    pub scales: Vec<ScaleConfig>,
    pub heads: usize,
    pub channels: usize,
    pub temporal_frames: usize,
    /// Share `P_k`/`P_v` across views at each scale instead of one pair per view.
    pub share_projections: bool,
}

/// Neighbor order on a ring: offsets -1, +1, -2, +2, ...
pub fn ring_neighbors(num_cameras: usize, per_camera: usize) -> Vec<Vec<usize>> {
    (0..num_cameras)
        .map(|i| {
            (0..per_camera)
                .map(|k| {
                    let offset = k / 2 + 1;
                    if k % 2 == 0 {
                        (i + num_cameras - offset % num_cameras) % num_cameras
                    } else {
                        (i + offset) % num_cameras
                    }
                })
                .collect()
        })
        .collect()
}

impl RigConfig {
    /// Ring rig with `per_camera` neighbors and no temporal frames.
    pub fn ring(
        name: impl Into<String>,
        num_cameras: usize,
        per_camera: usize,
        scales: Vec<ScaleConfig>,
        channels: usize,
        heads: usize,
    ) -> Result<Self> {
        let cfg = Self {
            name: name.into(),
            num_cameras,
            neighbors: ring_neighbors(num_cameras, per_camera),
            scales,
            heads,
            channels,
            temporal_frames: 0,
            share_projections: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(EgaError::Config(m));
        if self.num_cameras == 0 {
            return cfg_err("num_cameras must be positive".into());
        }
        if self.neighbors.len() != self.num_cameras {
            return cfg_err(format!(
                "neighbors lists {} cameras, rig has {}",
                self.neighbors.len(),
                self.num_cameras
            ));
        }
        let per_camera = self.neighbors[0].len();
        if per_camera == 0 {
            return cfg_err("every camera needs at least one neighbor".into());
        }
        for (i, list) in self.neighbors.iter().enumerate() {
            if list.len() != per_camera {
                return cfg_err(format!(
                    "camera {i} has {} neighbors, camera 0 has {per_camera}",
                    list.len()
                ));
            }
            for (k, &j) in list.iter().enumerate() {
                if j >= self.num_cameras {
                    return cfg_err(format!("camera {i} lists out-of-range neighbor {j}"));
                }
                if j == i {
                    return cfg_err(format!("camera {i} lists itself as a neighbor"));
                }
                if list[..k].contains(&j) {
                    return cfg_err(format!("camera {i} lists neighbor {j} twice"));
                }
            }
        }
        if self.scales.is_empty() {
            return cfg_err("at least one scale is required".into());
        }
        for (s, sc) in self.scales.iter().enumerate() {
            if sc.positions() == 0 {
                return cfg_err(format!("scale {s} has zero positions"));
            }
            if sc.projection_dim == Some(0) {
                return cfg_err(format!("scale {s} has projection_dim 0"));
            }
        }
        if self.channels == 0 || self.heads == 0 {
            return cfg_err("channels and heads must be positive".into());
        }
        if !self.channels.is_multiple_of(self.heads) {
            return cfg_err(format!(
                "heads ({}) must divide channels ({})",
                self.heads, self.channels
            ));
        }
        Ok(())
    }

    /// Neighbor count `n_i`.
    pub fn neighbors_per_camera(&self) -> usize {
        self.neighbors.first().map_or(0, Vec::len)
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Length of the stacked reference at `scale`: `(n_i + n_t)·n_s`.
    pub fn reference_len(&self, scale: usize) -> usize {
        (self.neighbors_per_camera() + self.temporal_frames) * self.scales[scale].positions()
    }

    /// Whether view `j`'s current features enter view `i`'s reference.
    pub fn is_neighbor(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].contains(&j)
    }

    pub fn with_temporal_frames(mut self, frames: usize) -> Self {
        self.temporal_frames = frames;
        self
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    pub fn preset(preset: Preset) -> Self {
        let lr = ScaleConfig::new(11, 20, None);
        let (name, num_cameras, scales, channels, heads) = match preset {
            Preset::Lr => ("LR", 6, vec![lr; 5], DEFAULT_CHANNELS, DEFAULT_HEADS),
            Preset::Mr => {
                let mut s = vec![ScaleConfig::new(22, 40, Some(880)); 4];
                s.push(lr);
                ("MR", 6, s, DEFAULT_CHANNELS, DEFAULT_HEADS)
            }
            Preset::Hr => {
                let mut s = vec![ScaleConfig::new(44, 80, Some(1024))];
                s.extend([ScaleConfig::new(22, 40, Some(880)); 3]);
                s.push(lr);
                ("HR", 6, s, DEFAULT_CHANNELS, DEFAULT_HEADS)
            }
            Preset::DdadLr => {
                ("DDAD-LR", 6, vec![ScaleConfig::new(12, 40, None); 5], DEFAULT_CHANNELS, DEFAULT_HEADS)
            }
            Preset::DdadMr => (
                "DDAD-MR",
                6,
                vec![ScaleConfig::new(24, 40, Some(960)); 5],
                DEFAULT_CHANNELS,
                DEFAULT_HEADS,
            ),
            Preset::Minimal => (
                "MINIMAL",
                2,
                vec![ScaleConfig::new(2, 3, Some(4)), ScaleConfig::new(2, 2, None)],
                8,
                2,
            ),
        };
        let per_camera = if num_cameras == 2 { 1 } else { 2 };
        Self {
            name: name.into(),
            num_cameras,
            neighbors: ring_neighbors(num_cameras, per_camera),
            scales,
            heads,
            channels,
            temporal_frames: 0,
            share_projections: false,
        }
    }
}

/// Named rig configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Lr,
    Mr,
    Hr,
    DdadLr,
    DdadMr,
    /// Two cameras, tiny scales; for quick gradient checks.
    Minimal,
}

impl Preset {
    pub const ALL: [Preset; 6] =
        [Preset::Lr, Preset::Mr, Preset::Hr, Preset::DdadLr, Preset::DdadMr, Preset::Minimal];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Lr => "LR",
            Preset::Mr => "MR",
            Preset::Hr => "HR",
            Preset::DdadLr => "DDAD-LR",
            Preset::DdadMr => "DDAD-MR",
            Preset::Minimal => "MINIMAL",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = EgaError;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.to_ascii_uppercase().replace('_', "-");
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == upper)
            .ok_or_else(|| EgaError::Config(format!("unknown preset '{s}'")))
    }
}

/// On-disk form of a rig. Either `neighbors` or `ring_neighbors` must be given.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default = "default_name")]
    name: String,
    num_cameras: usize,
    neighbors: Option<Vec<Vec<usize>>>,
    ring_neighbors: Option<usize>,
    scales: Vec<ScaleConfig>,
    #[serde(default = "default_heads")]
    heads: usize,
    #[serde(default = "default_channels")]
    channels: usize,
    #[serde(default)]
    temporal_frames: usize,
    #[serde(default)]
    share_projections: bool,
    seed: Option<u64>,
}

fn default_name() -> String {
    "custom".into()
}
fn default_heads() -> usize {
    DEFAULT_HEADS
}
fn default_channels() -> usize {
    DEFAULT_CHANNELS
}

/// A parsed config file: the rig plus an optional seed.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub rig: RigConfig,
    pub seed: Option<u64>,
}

/// Parses a TOML rig description.
pub fn parse_config(text: &str) -> Result<LoadedConfig> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(1, |span| text[..span.start].matches('\n').count() + 1);
        EgaError::ConfigParse { line, message: e.message().to_string() }
    })?;
    let neighbors = match (file.neighbors, file.ring_neighbors) {
        (Some(n), None) => n,
        (None, Some(k)) => ring_neighbors(file.num_cameras, k),
        (None, None) => ring_neighbors(file.num_cameras, 2.min(file.num_cameras.saturating_sub(1))),
        (Some(_), Some(_)) => {
            return Err(EgaError::Config("give either neighbors or ring_neighbors, not both".into()))
        }
    };
    let rig = RigConfig {
        name: file.name,
        num_cameras: file.num_cameras,
        neighbors,
        scales: file.scales,
        heads: file.heads,
        channels: file.channels,
        temporal_frames: file.temporal_frames,
        share_projections: file.share_projections,
    };
    rig.validate()?;
    Ok(LoadedConfig { rig, seed: file.seed })
}

/// One view's flattened features at one scale and time step.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub view: usize,
    pub scale: usize,
    /// 0 for the current frame, -1 for the previous one, ...
    pub time_offset: i32,
    pub data: Matrix,
}

type FeatureKey = (usize, usize, i32);

/// Feature maps indexed by (view, scale, time offset). Insertion order is
/// irrelevant to every consumer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureBank {
    maps: HashMap<FeatureKey, Matrix>,
}

impl FeatureBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_maps(maps: impl IntoIterator<Item = FeatureMap>) -> Result<Self> {
        let mut bank = Self::new();
        for m in maps {
            bank.insert(m)?;
        }
        Ok(bank)
    }

    pub fn insert(&mut self, map: FeatureMap) -> Result<()> {
        if map.time_offset > 0 {
            return Err(EgaError::Input(format!(
                "view {} scale {}: future frame offset {} is not allowed",
                map.view, map.scale, map.time_offset
            )));
        }
        let key = (map.view, map.scale, map.time_offset);
        if self.maps.insert(key, map.data).is_some() {
            return Err(EgaError::Input(format!("duplicate feature map for {key:?}")));
        }
        Ok(())
    }

    /// Overwrites an existing entry, or adds it.
    pub fn replace(&mut self, map: FeatureMap) {
        self.maps.insert((map.view, map.scale, map.time_offset), map.data);
    }

    pub fn get(&self, view: usize, scale: usize, time_offset: i32) -> Option<&Matrix> {
        self.maps.get(&(view, scale, time_offset))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// All maps, sorted by (view, scale, time).
    pub fn to_maps(&self) -> Vec<FeatureMap> {
        let mut keys: Vec<_> = self.maps.keys().copied().collect();
        keys.sort_unstable();
        keys.into_iter()
            .map(|(view, scale, time_offset)| FeatureMap {
                view,
                scale,
                time_offset,
                data: self.maps[&(view, scale, time_offset)].clone(),
            })
            .collect()
    }

    /// Synthetic features for every (view, scale, t) the config needs,
    /// uniform in [-1, 1].
    pub fn random(config: &RigConfig, seed: u64) -> Self {
        let mut bank = Self::new();
        for view in 0..config.num_cameras {
            for (scale, sc) in config.scales.iter().enumerate() {
                for back in 0..=config.temporal_frames {
                    let s = derive_seed(seed, &[view as u64, scale as u64, back as u64]);
                    bank.replace(FeatureMap {
                        view,
                        scale,
                        time_offset: -(back as i32),
                        data: seeded_init(sc.positions(), config.channels, s, 1.0),
                    });
                }
            }
        }
        bank
    }

    /// Looks up a map and checks it against the config's shape for `scale`.
    pub fn require(
        &self,
        config: &RigConfig,
        view: usize,
        scale: usize,
        time_offset: i32,
    ) -> Result<&Matrix> {
        let m = self.get(view, scale, time_offset).ok_or_else(|| {
            EgaError::Input(format!(
                "missing feature map for view {view}, scale {scale}, time offset {time_offset}"
            ))
        })?;
        let expected = (config.scales[scale].positions(), config.channels);
        if m.shape() != expected {
            return Err(EgaError::shape("feature map", m.shape(), expected));
        }
        Ok(m)
    }
}

fn check_indices(config: &RigConfig, view: usize, scale: usize) -> Result<()> {
    if view >= config.num_cameras || scale >= config.scales.len() {
        return Err(EgaError::Input(format!(
            "view {view} / scale {scale} outside rig ({} cameras, {} scales)",
            config.num_cameras,
            config.scales.len()
        )));
    }
    Ok(())
}

/// Current-frame features of `view`'s neighbors, stacked in config order:
/// `(n_i·n_s) × c`.
pub fn neighbor_stack(bank: &FeatureBank, view: usize, scale: usize, config: &RigConfig) -> Result<Matrix> {
    check_indices(config, view, scale)?;
    let parts = config.neighbors[view]
        .iter()
        .map(|&j| bank.require(config, j, scale, 0))
        .collect::<Result<Vec<_>>>()?;
    concat_rows(&parts)
}

/// Neighbors at the current frame followed by `view`'s own features at
/// t-1, t-2, ..., t-n_t: `((n_i+n_t)·n_s) × c`.
pub fn temporal_stack(bank: &FeatureBank, view: usize, scale: usize, config: &RigConfig) -> Result<Matrix> {
    check_indices(config, view, scale)?;
    let mut parts = config.neighbors[view]
        .iter()
        .map(|&j| bank.require(config, j, scale, 0))
        .collect::<Result<Vec<_>>>()?;
    for back in 1..=config.temporal_frames {
        parts.push(bank.require(config, view, scale, -(back as i32))?);
    }
    concat_rows(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_table_values() {
        let mr = RigConfig::preset(Preset::Mr);
        assert_eq!(mr.scales[0].positions(), 880);
        assert_eq!(mr.scales[0].projection_dim, Some(880));
        assert_eq!(mr.reference_len(0), 1760);
        assert_eq!(mr.scales[4].projection_dim, None);
        assert_eq!(mr.reference_len(4), 440);

        let hr = RigConfig::preset(Preset::Hr);
        assert_eq!(hr.scales[0].positions(), 3520);
        assert_eq!(hr.reference_len(0), 7040);
        assert_eq!(hr.scales[0].projection_dim, Some(1024));
        assert!(hr.scales[1..4].iter().all(|s| s.projection_dim == Some(880)));

        let lr = RigConfig::preset(Preset::Lr);
        assert_eq!(lr.scales.len(), 5);
        assert!(lr.scales.iter().all(|s| s.projection_dim.is_none() && s.positions() == 220));
        assert_eq!(lr.heads, 8);

        let dmr = RigConfig::preset(Preset::DdadMr);
        assert!(dmr.scales.iter().all(|s| s.positions() == 960 && s.projection_dim == Some(960)));
        let dlr = RigConfig::preset(Preset::DdadLr);
        assert!(dlr.scales.iter().all(|s| s.positions() == 480 && s.projection_dim.is_none()));

        for p in Preset::ALL {
            RigConfig::preset(p).validate().unwrap();
        }
    }

    #[test]
    fn preset_names_parse() {
        assert_eq!("lr".parse::<Preset>().unwrap(), Preset::Lr);
        assert_eq!("DDAD-MR".parse::<Preset>().unwrap(), Preset::DdadMr);
        assert_eq!("ddad_lr".parse::<Preset>().unwrap(), Preset::DdadLr);
        assert!(matches!("XR".parse::<Preset>(), Err(EgaError::Config(_))));
    }

    #[test]
    fn ring_is_left_then_right_and_symmetric() {
        let n = ring_neighbors(6, 2);
        assert_eq!(n[0], vec![5, 1]);
        assert_eq!(n[3], vec![2, 4]);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(n[i].contains(&j), n[j].contains(&i));
            }
        }
    }

    #[test]
    fn validation_rejects_bad_rigs() {
        let mut cfg = RigConfig::preset(Preset::Lr);
        cfg.neighbors[2] = vec![2, 3];
        assert!(cfg.validate().is_err());
        let mut cfg = RigConfig::preset(Preset::Lr);
        cfg.neighbors[1] = vec![0];
        assert!(cfg.validate().is_err());
        let cfg = RigConfig::preset(Preset::Lr).with_heads(7);
        assert!(matches!(cfg.validate(), Err(EgaError::Config(_))));
    }

    #[test]
    fn neighbor_stack_lr_view0() {
        let cfg = RigConfig::preset(Preset::Lr);
        let bank = FeatureBank::random(&cfg, 3);
        let h = neighbor_stack(&bank, 0, 0, &cfg).unwrap();
        assert_eq!(h.shape(), (440, 64));
        assert_eq!(&h.slice_rows(0, 220), bank.get(5, 0, 0).unwrap());
        assert_eq!(&h.slice_rows(220, 440), bank.get(1, 0, 0).unwrap());
    }

    #[test]
    fn single_neighbor_stack_is_that_neighbor() {
        let cfg = RigConfig::preset(Preset::Minimal);
        let bank = FeatureBank::random(&cfg, 1);
        let h = neighbor_stack(&bank, 0, 1, &cfg).unwrap();
        assert_eq!(&h, bank.get(1, 1, 0).unwrap());
    }

    #[test]
    fn stacking_ignores_storage_order() {
        let cfg = RigConfig::preset(Preset::Lr).with_temporal_frames(1);
        let bank = FeatureBank::random(&cfg, 8);
        let mut maps = bank.to_maps();
        maps.reverse();
        maps.rotate_left(7);
        let shuffled = FeatureBank::from_maps(maps).unwrap();
        assert_eq!(
            neighbor_stack(&bank, 2, 1, &cfg).unwrap(),
            neighbor_stack(&shuffled, 2, 1, &cfg).unwrap()
        );
        assert_eq!(
            temporal_stack(&bank, 2, 1, &cfg).unwrap(),
            temporal_stack(&shuffled, 2, 1, &cfg).unwrap()
        );
    }

    #[test]
    fn temporal_stack_row_counts() {
        for (frames, rows) in [(0, 440), (1, 660), (2, 880)] {
            let cfg = RigConfig::preset(Preset::Lr).with_temporal_frames(frames);
            let bank = FeatureBank::random(&cfg, 4);
            let h = temporal_stack(&bank, 0, 0, &cfg).unwrap();
            assert_eq!(h.rows(), rows);
            assert_eq!(h.rows(), cfg.reference_len(0));
            if frames == 0 {
                assert_eq!(h, neighbor_stack(&bank, 0, 0, &cfg).unwrap());
            } else {
                assert_eq!(&h.slice_rows(440, 660), bank.get(0, 0, -1).unwrap());
            }
        }
    }

    #[test]
    fn missing_maps_are_named() {
        let cfg = RigConfig::preset(Preset::Lr).with_temporal_frames(1);
        let mut maps = FeatureBank::random(&cfg, 4).to_maps();
        maps.retain(|m| !(m.view == 1 && m.scale == 3 && m.time_offset == 0));
        let bank = FeatureBank::from_maps(maps).unwrap();
        let err = neighbor_stack(&bank, 0, 3, &cfg).unwrap_err().to_string();
        assert!(err.contains("view 1") && err.contains("scale 3"), "{err}");

        let mut maps = FeatureBank::random(&cfg, 4).to_maps();
        maps.retain(|m| !(m.view == 0 && m.time_offset == -1));
        let bank = FeatureBank::from_maps(maps).unwrap();
        assert!(matches!(temporal_stack(&bank, 0, 0, &cfg), Err(EgaError::Input(_))));
        assert!(neighbor_stack(&bank, 0, 0, &cfg).is_ok());
    }

    #[test]
    fn future_frames_rejected() {
        let mut bank = FeatureBank::new();
        let err = bank.insert(FeatureMap { view: 0, scale: 0, time_offset: 1, data: Matrix::zeros(1, 1) });
        assert!(err.is_err());
    }

    #[test]
    fn parse_config_file() {
        let text = r#"
name = "two-ring"
num_cameras = 4
ring_neighbors = 2
heads = 2
channels = 8
temporal_frames = 1
seed = 17

[[scales]]
height = 2
width = 3
projection_dim = 5

[[scales]]
height = 1
width = 2
"#;
        let loaded = parse_config(text).unwrap();
        assert_eq!(loaded.seed, Some(17));
        assert_eq!(loaded.rig.neighbors[0], vec![3, 1]);
        assert_eq!(loaded.rig.scales[0].projection_dim, Some(5));
        assert_eq!(loaded.rig.scales[1].projection_dim, None);
        assert_eq!(loaded.rig.reference_len(0), 18);
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "num_cameras = 4\nheads = 2\nchannels = = 8\n";
        match parse_config(text) {
            Err(EgaError::ConfigParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
