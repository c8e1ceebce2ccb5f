use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::subnet::SubNet;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::Scalar;

/// Number of secret image channels.
pub const SECRET_CHANNELS: usize = 3;

/// Default feature width of every hidden convolution.
pub const DEFAULT_WIDTH: usize = 64;

/// Default number of residual blocks per sub-network.
pub const DEFAULT_BLOCKS: usize = 4;

/// Inter-stage wiring and parameter sharing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Independent stages.
    M,
    /// Hiding stages pass features forward.
    ME,
    /// Revealing stages pass features forward.
    MD,
    /// Both chains pass features forward.
    MED,
    /// One hiding and one revealing parameter set shared by every stage.
    S,
    /// All frames stacked into one tensor, one hiding and one revealing net.
    SingleShot,
}

impl Variant {
    pub const MULTI_STAGE: [Variant; 5] = [Variant::M, Variant::ME, Variant::MD, Variant::MED, Variant::S];

    pub fn name(self) -> &'static str {
        match self {
            Variant::M => "M",
            Variant::ME => "M-E",
            Variant::MD => "M-D",
            Variant::MED => "M-ED",
            Variant::S => "S",
            Variant::SingleShot => "single-shot",
        }
    }

    pub fn hiding_connected(self) -> bool {
        matches!(self, Variant::ME | Variant::MED)
    }

    pub fn revealing_connected(self) -> bool {
        matches!(self, Variant::MD | Variant::MED)
    }

    pub fn shared(self) -> bool {
        self == Variant::S
    }

    /// Whether stage `i` revealing depends on container `i` alone.
    pub fn stage_independent(self) -> bool {
        matches!(self, Variant::M | Variant::S | Variant::ME)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "M" => Variant::M,
            "M-E" => Variant::ME,
            "M-D" => Variant::MD,
            "M-ED" => Variant::MED,
            "S" => Variant::S,
            "single-shot" => Variant::SingleShot,
            other => return Err(Error::config(format!("unknown variant {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub stages: usize,
    pub blocks: usize,
    pub width: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stages: 5,
            blocks: DEFAULT_BLOCKS,
            width: DEFAULT_WIDTH,
            variant: Variant::M,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::config("stage count must be at least 1"));
        }
        if self.blocks == 0 {
            return Err(Error::config("sub-networks need at least one residual block"));
        }
        if self.width == 0 {
            return Err(Error::config("feature width must be positive"));
        }
        Ok(())
    }

    fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("t", self.stages);
        kv.insert("blocks", self.blocks);
        kv.insert("width", self.width);
        kv.insert("variant", self.variant);
        kv.insert("seed", self.seed);
        kv
    }

    fn from_kv(kv: &KvMap) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            kv.parse_value::<usize>(k)?
                .ok_or_else(|| Error::Checkpoint(format!("header lacks `{k}`")))
        };
        Ok(Self {
            stages: get("t")?,
            blocks: get("blocks")?,
            width: get("width")?,
            variant: kv.require("variant")?.parse()?,
            seed: kv
                .parse_value::<u64>("seed")?
                .ok_or_else(|| Error::Checkpoint("header lacks `seed`".into()))?,
        })
    }
}

/// Per-stage hiding and revealing parameter sets.
///
/// Shared variants store a single set of each; single-shot stores one
/// hiding net over all frames and one revealing net.
#[derive(Clone, Debug, PartialEq)]
pub struct StageModels<S = f32> {
    config: ModelConfig,
    hiding: Vec<SubNet<S>>,
    revealing: Vec<SubNet<S>>,
}

impl<S: Scalar> StageModels<S> {
    /// Deterministic in `config.seed`. Both heads start at zero, so a fresh
    /// model leaves every carrier untouched and reveals nothing.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layout = Layout::of(&config);
        let hiding = layout
            .hiding
            .iter()
            .map(|&(c_in, c_out)| SubNet::init(c_in, c_out, config.width, layout.depth, &mut rng))
            .collect();
        let revealing = layout
            .revealing
            .iter()
            .map(|&(c_in, c_out)| SubNet::init(c_in, c_out, config.width, layout.depth, &mut rng))
            .collect();
        Ok(Self {
            config,
            hiding,
            revealing,
        })
    }

    /// Same layout, every parameter zero. Used as the gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            hiding: self.hiding.iter().map(SubNet::zeros_like).collect(),
            revealing: self.revealing.iter().map(SubNet::zeros_like).collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn stages(&self) -> usize {
        self.config.stages
    }

    fn set_index(&self, stage: usize) -> usize {
        if self.hiding.len() == 1 {
            0
        } else {
            stage
        }
    }

    /// Hiding net of zero-based `stage`.
    pub fn hiding(&self, stage: usize) -> &SubNet<S> {
        &self.hiding[self.set_index(stage)]
    }

    pub fn hiding_mut(&mut self, stage: usize) -> &mut SubNet<S> {
        let i = self.set_index(stage);
        &mut self.hiding[i]
    }

    pub fn revealing(&self, stage: usize) -> &SubNet<S> {
        &self.revealing[self.set_index(stage)]
    }

    pub fn revealing_mut(&mut self, stage: usize) -> &mut SubNet<S> {
        let i = self.set_index(stage);
        &mut self.revealing[i]
    }

    /// Distinct hiding parameter sets.
    pub fn hiding_sets(&self) -> &[SubNet<S>] {
        &self.hiding
    }

    pub fn revealing_sets(&self) -> &[SubNet<S>] {
        &self.revealing
    }

    pub fn num_params(&self) -> usize {
        self.hiding
            .iter()
            .chain(&self.revealing)
            .map(SubNet::num_params)
            .sum()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, net) in self.hiding.iter().enumerate() {
            names.extend(net.param_names(&format!("hiding{i}")));
        }
        for (i, net) in self.revealing.iter().enumerate() {
            names.extend(net.param_names(&format!("revealing{i}")));
        }
        names
    }

    pub fn param_slices(&self) -> Vec<&[S]> {
        self.hiding
            .iter()
            .chain(&self.revealing)
            .flat_map(SubNet::param_slices)
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        self.hiding
            .iter_mut()
            .chain(self.revealing.iter_mut())
            .flat_map(SubNet::param_slices_mut)
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(S::BYTES);
        let header = self.config.to_kv().to_text();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let names = self.param_names();
        let slices = self.param_slices();
        out.extend_from_slice(&(slices.len() as u32).to_le_bytes());
        for (name, data) in names.iter().zip(slices) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for &v in data {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let dtype = r.take(1)?[0];
        if dtype != S::BYTES {
            return Err(Error::Checkpoint(format!(
                "stored with {dtype}-byte floats, loading as {}-byte",
                S::BYTES
            )));
        }
        let header_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| Error::Checkpoint("header is not utf-8".into()))?;
        let config = ModelConfig::from_kv(&KvMap::parse(header)?)?;
        config.validate()?;
        let mut models = Self::init_zeroed(config);
        let names = models.param_names();
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        if count != names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {count}",
                names.len()
            )));
        }
        let width = S::BYTES as usize;
        for (expected, slot) in names.iter().zip(models.param_slices_mut()) {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = r.take(name_len)?;
            if name != expected.as_bytes() {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {expected}, found {}",
                    String::from_utf8_lossy(name)
                )));
            }
            let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
            if len != slot.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {expected}: expected {} values, found {len}",
                    slot.len()
                )));
            }
            let raw = r.take(len * width)?;
            for (dst, chunk) in slot.iter_mut().zip(raw.chunks_exact(width)) {
                *dst = S::read_le(chunk);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(models)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn checkpoint_id(&self) -> String {
        checkpoint_id_of(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(checkpoint_id_of(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn init_zeroed(config: ModelConfig) -> Self {
        let layout = Layout::of(&config);
        let build = |shapes: &[(usize, usize)]| {
            shapes
                .iter()
                .map(|&(c_in, c_out)| SubNet::zeros(c_in, c_out, config.width, layout.depth))
                .collect()
        };
        Self {
            hiding: build(&layout.hiding),
            revealing: build(&layout.revealing),
            config,
        }
    }

    /// Converts every parameter to another precision.
    pub fn cast<T: Scalar>(&self) -> StageModels<T> {
        let mut out = StageModels::<T>::init_zeroed(self.config.clone());
        for (dst, src) in out.param_slices_mut().into_iter().zip(self.param_slices()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = T::of(s.f64());
            }
        }
        out
    }
}

pub fn checkpoint_id_of(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

const CHECKPOINT_MAGIC: &[u8] = b"RSHCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Input/output channel counts of each distinct parameter set.
struct Layout {
    hiding: Vec<(usize, usize)>,
    revealing: Vec<(usize, usize)>,
    depth: usize,
}

impl Layout {
    fn of(config: &ModelConfig) -> Self {
        let t = config.stages;
        let w = config.width;
        match config.variant {
            Variant::SingleShot => Layout {
                hiding: vec![(SECRET_CHANNELS + t, t)],
                revealing: vec![(t, SECRET_CHANNELS)],
                depth: config.blocks * t,
            },
            Variant::S => Layout {
                hiding: vec![(SECRET_CHANNELS + 1, 1)],
                revealing: vec![(1, SECRET_CHANNELS)],
                depth: config.blocks,
            },
            v => {
                let extra = |connected: bool, i: usize| if connected && i > 0 { w } else { 0 };
                Layout {
                    hiding: (0..t)
                        .map(|i| (SECRET_CHANNELS + 1 + extra(v.hiding_connected(), i), 1))
                        .collect(),
                    revealing: (0..t)
                        .map(|i| (1 + extra(v.revealing_connected(), i), SECRET_CHANNELS))
                        .collect(),
                    depth: config.blocks,
                }
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(variant: Variant) -> ModelConfig {
        ModelConfig {
            stages: 3,
            blocks: 1,
            width: 8,
            variant,
            seed: 11,
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = StageModels::<f32>::init(config(Variant::M)).unwrap();
        let b = StageModels::<f32>::init(config(Variant::M)).unwrap();
        assert_eq!(a, b);
        let mut other = config(Variant::M);
        other.seed = 12;
        assert_ne!(a, StageModels::<f32>::init(other).unwrap());
    }

    #[test]
    fn shared_variant_holds_one_set_each() {
        let cfg = ModelConfig {
            stages: 5,
            ..config(Variant::S)
        };
        let s = StageModels::<f32>::init(cfg.clone()).unwrap();
        assert_eq!(s.hiding_sets().len(), 1);
        assert_eq!(s.revealing_sets().len(), 1);
        for i in 0..5 {
            assert!(std::ptr::eq(s.hiding(i), s.hiding(0)));
        }
        let m = StageModels::<f32>::init(ModelConfig {
            variant: Variant::M,
            ..cfg
        })
        .unwrap();
        assert_eq!(m.num_params(), 5 * s.num_params());
    }

    #[test]
    fn connected_stages_take_feature_channels() {
        let m = StageModels::<f32>::init(config(Variant::MED)).unwrap();
        assert_eq!(m.hiding(0).c_in(), 4);
        assert_eq!(m.hiding(1).c_in(), 4 + 8);
        assert_eq!(m.revealing(0).c_in(), 1);
        assert_eq!(m.revealing(2).c_in(), 1 + 8);
    }

    #[test]
    fn single_shot_layout() {
        let m = StageModels::<f32>::init(config(Variant::SingleShot)).unwrap();
        assert_eq!(m.hiding(0).c_in(), 6);
        assert_eq!(m.hiding(0).c_out(), 3);
        assert_eq!(m.revealing(0).c_in(), 3);
        assert_eq!(m.hiding(0).depth(), 3);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        for v in [Variant::M, Variant::MED, Variant::S, Variant::SingleShot] {
            let m = StageModels::<f32>::init(config(v)).unwrap();
            let bytes = m.to_bytes();
            let back = StageModels::<f32>::from_bytes(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.checkpoint_id(), m.checkpoint_id());
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let m = StageModels::<f32>::init(config(Variant::M)).unwrap();
        let bytes = m.to_bytes();
        assert!(StageModels::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(StageModels::<f64>::from_bytes(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(StageModels::<f32>::from_bytes(&bad).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = config(Variant::M);
        c.stages = 0;
        assert!(StageModels::<f32>::init(c.clone()).is_err());
        c.stages = 1;
        c.blocks = 0;
        assert!(StageModels::<f32>::init(c).is_err());
    }

    #[test]
    fn variant_names_parse_back() {
        for v in Variant::MULTI_STAGE.iter().chain([&Variant::SingleShot]) {
            assert_eq!(v.name().parse::<Variant>().unwrap(), *v);
        }
        assert!("X".parse::<Variant>().is_err());
    }
}
