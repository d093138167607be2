use std::fmt::Write as _;
use std::str::FromStr;

use super::NetworkError;
use crate::neurons::NeuronParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    T,
    S,
    B,
    L,
    Custom,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::T => "T",
            Variant::S => "S",
            Variant::B => "B",
            Variant::L => "L",
            Variant::Custom => "custom",
        }
    }

    /// Blocks and channels per stage.
    pub fn layout(self) -> Option<([usize; 4], [usize; 4])> {
        match self {
            Variant::T => Some(([1, 1, 1, 1], [16, 32, 64, 128])),
            Variant::S => Some(([1, 1, 1, 1], [24, 48, 96, 160])),
            Variant::B => Some(([2, 2, 2, 2], [16, 32, 64, 128])),
            Variant::L => Some(([2, 2, 2, 2], [64, 128, 128, 256])),
            Variant::Custom => None,
        }
    }
}

impl FromStr for Variant {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "T" | "t" => Ok(Variant::T),
            "S" | "s" => Ok(Variant::S),
            "B" | "b" => Ok(Variant::B),
            "L" | "l" => Ok(Variant::L),
            "custom" => Ok(Variant::Custom),
            other => Err(NetworkError::Config(format!("unknown variant {other:?}"))),
        }
    }
}

/// Declarative description of the backbone: a voxel-coding stem followed by
/// four stages of (downsample, residual blocks), then a pooled classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub blocks_per_stage: [usize; 4],
    pub channels_per_stage: [usize; 4],
    pub stem_channels: usize,
    /// Conv + neuron repetitions in the stem.
    pub svc_depth: usize,
    /// Conv + neuron repetitions in the second half of each block.
    pub block_depth: usize,
    pub timesteps: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub neuron: NeuronParams,
    /// Scale of the fan-in uniform initializer.
    pub init_gain: f32,
}

impl NetworkSpec {
    pub fn variant(variant: Variant, in_channels: usize, num_classes: usize) -> Self {
        let (blocks, channels) = variant.layout().unwrap_or(([1; 4], [16, 32, 64, 128]));
        Self {
            variant,
            blocks_per_stage: blocks,
            channels_per_stage: channels,
            stem_channels: channels[0],
            svc_depth: 2,
            block_depth: 2,
            timesteps: 1,
            in_channels,
            num_classes,
            neuron: NeuronParams::default(),
            init_gain: 2.0,
        }
    }

    pub fn d_max(&self) -> u32 {
        self.neuron.d_max
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::Config(m));
        if self.channels_per_stage.contains(&0) || self.stem_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return bad("in_channels and num_classes must be positive".into());
        }
        if self.svc_depth == 0 {
            return bad("svc_depth must be at least 1".into());
        }
        if self.timesteps == 0 {
            return bad("timesteps must be at least 1".into());
        }
        if self.init_gain.is_nan() || self.init_gain <= 0.0 {
            return bad("init_gain must be positive".into());
        }
        self.neuron.validate()?;
        Ok(())
    }

    /// Plain-text `key=value` form, one key per line.
    pub fn to_config_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "variant={}", self.variant.name());
        let _ = writeln!(s, "blocks_per_stage={}", list(&self.blocks_per_stage));
        let _ = writeln!(s, "channels_per_stage={}", list(&self.channels_per_stage));
        let _ = writeln!(s, "stem_channels={}", self.stem_channels);
        let _ = writeln!(s, "svc_depth={}", self.svc_depth);
        let _ = writeln!(s, "block_depth={}", self.block_depth);
        let _ = writeln!(s, "timesteps={}", self.timesteps);
        let _ = writeln!(s, "d_max={}", self.neuron.d_max);
        let _ = writeln!(s, "beta={}", self.neuron.beta);
        let _ = writeln!(s, "v_th={}", self.neuron.v_th);
        let _ = writeln!(s, "in_channels={}", self.in_channels);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "init_gain={}", self.init_gain);
        s
    }

    /// Parses [`Self::to_config_text`] output. Keys that are absent keep the
    /// variant's defaults; unknown keys are rejected.
    pub fn from_config_text(text: &str) -> Result<Self, NetworkError> {
        let cfg = |m: String| NetworkError::Config(m);
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg(format!("line {}: expected key=value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let variant = pairs
            .iter()
            .find(|(k, _)| k == "variant")
            .map(|(_, v)| v.parse())
            .transpose()?
            .unwrap_or(Variant::T);
        let mut spec = Self::variant(variant, 3, 4);
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T, NetworkError> {
            v.parse()
                .map_err(|_| NetworkError::Config(format!("bad value for {k}: {v:?}")))
        }
        fn four(k: &str, v: &str) -> Result<[usize; 4], NetworkError> {
            let items: Vec<usize> = v
                .split(',')
                .map(|x| num(k, x.trim()))
                .collect::<Result<_, _>>()?;
            items
                .try_into()
                .map_err(|_| NetworkError::Config(format!("{k} needs exactly 4 entries")))
        }
        for (k, v) in &pairs {
            match k.as_str() {
                "variant" => {}
                "blocks_per_stage" => spec.blocks_per_stage = four(k, v)?,
                "channels_per_stage" => spec.channels_per_stage = four(k, v)?,
                "stem_channels" => spec.stem_channels = num(k, v)?,
                "svc_depth" => spec.svc_depth = num(k, v)?,
                "block_depth" => spec.block_depth = num(k, v)?,
                "timesteps" => spec.timesteps = num(k, v)?,
                "d_max" => spec.neuron.d_max = num(k, v)?,
                "beta" => spec.neuron.beta = num(k, v)?,
                "v_th" => spec.neuron.v_th = num(k, v)?,
                "in_channels" => spec.in_channels = num(k, v)?,
                "num_classes" => spec.num_classes = num(k, v)?,
                "init_gain" => spec.init_gain = num(k, v)?,
                other => return Err(cfg(format!("unknown key {other:?}"))),
            }
        }
        if let Some((b, c)) = spec.variant.layout() {
            if (b, c) != (spec.blocks_per_stage, spec.channels_per_stage) {
                spec.variant = Variant::Custom;
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}
