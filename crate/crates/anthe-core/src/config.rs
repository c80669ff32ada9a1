//! Declarative architecture configuration: one `ArchConfig` describes one
//! model variant (widths, gate kind, embedding kind, feed-forward kind, TC
//! placements), serialized as a flat key=value file. Named presets encode
//! the reference variants so the census tool can reproduce them directly.

use std::path::Path;

use crate::attention::GateKind;
use crate::error::{Error, Result};
use crate::hsoftpos::HSoftPosConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FfKind {
    #[default]
    Ff,
    Geglu,
}

impl FfKind {
    pub fn name(self) -> &'static str {
        match self {
            FfKind::Ff => "ff",
            FfKind::Geglu => "geglu",
        }
    }

    pub fn parse(s: &str) -> Result<FfKind> {
        match s.to_ascii_lowercase().as_str() {
            "ff" => Ok(FfKind::Ff),
            "geglu" => Ok(FfKind::Geglu),
            other => Err(Error::config(format!(
                "unknown ff_kind {other:?}; expected ff or geglu"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EmbeddingKind {
    #[default]
    Full,
    HSoftPos,
}

impl EmbeddingKind {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingKind::Full => "full",
            EmbeddingKind::HSoftPos => "hsoftpos",
        }
    }

    pub fn parse(s: &str) -> Result<EmbeddingKind> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(EmbeddingKind::Full),
            "hsoftpos" => Ok(EmbeddingKind::HSoftPos),
            other => Err(Error::config(format!(
                "unknown embedding_kind {other:?}; expected full or hsoftpos"
            ))),
        }
    }
}

/// One TC placement: budget ratio and chain length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TcEntry {
    pub r: f64,
    pub n: usize,
}

/// Which linears are replaced by TC chains. The pseudo-key `layer` expands
/// to `ff` + `patt` with the same entry.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct TcPlanMap {
    pub emb: Option<TcEntry>,
    pub ff: Option<TcEntry>,
    pub patt: Option<TcEntry>,
    pub output: Option<TcEntry>,
}

impl TcPlanMap {
    pub fn is_empty(&self) -> bool {
        self.emb.is_none() && self.ff.is_none() && self.patt.is_none() && self.output.is_none()
    }

    fn parse(s: &str) -> Result<TcPlanMap> {
        let mut map = TcPlanMap::default();
        if s.trim() == "none" || s.trim().is_empty() {
            return Ok(map);
        }
        for item in s.split(',') {
            let parts: Vec<&str> = item.trim().split(':').collect();
            if parts.len() < 2 || parts.len() > 3 {
                return Err(Error::config(format!(
                    "tc_plan entry {item:?} must be target:r or target:r:n"
                )));
            }
            let r: f64 = parts[1]
                .parse()
                .map_err(|_| Error::config(format!("tc_plan ratio {:?} is not a number", parts[1])))?;
            let n: usize = match parts.get(2) {
                Some(p) => p
                    .parse()
                    .map_err(|_| Error::config(format!("tc_plan length {p:?} is not an integer")))?,
                None => 2,
            };
            let entry = Some(TcEntry { r, n });
            match parts[0] {
                "emb" => map.emb = entry,
                "ff" => map.ff = entry,
                "patt" => map.patt = entry,
                "output" => map.output = entry,
                "layer" => {
                    map.ff = entry;
                    map.patt = entry;
                }
                other => {
                    return Err(Error::config(format!(
                        "unknown tc_plan target {other:?}; expected emb, ff, patt, output, or layer"
                    )))
                }
            }
        }
        Ok(map)
    }

    fn serialize(&self) -> String {
        let mut parts = Vec::new();
        for (name, entry) in [
            ("emb", self.emb),
            ("ff", self.ff),
            ("patt", self.patt),
            ("output", self.output),
        ] {
            if let Some(e) = entry {
                parts.push(format!("{name}:{}:{}", e.r, e.n));
            }
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join(",")
        }
    }
}

/// Full declarative description of one architecture variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub d_model: usize,
    /// Encoder/decoder depth.
    pub n: usize,
    /// Attention head count.
    pub d_h: usize,
    /// Feed-forward width; `None` derives 4 * d_model.
    pub d_ff_override: Option<usize>,
    pub p_dropout: f64,
    pub n_vocab: usize,
    pub ff_kind: FfKind,
    pub embedding_kind: EmbeddingKind,
    pub gate: GateKind,
    pub share_embeddings: bool,
    pub patt_enabled: bool,
    pub ff_enabled: bool,
    pub tc_plan: TcPlanMap,
    pub l_sp: usize,
    pub n_sp: usize,
}

impl Default for ArchConfig {
    fn default() -> ArchConfig {
        ArchConfig {
            d_model: 512,
            n: 6,
            d_h: 8,
            d_ff_override: None,
            p_dropout: 0.1,
            n_vocab: 32000,
            ff_kind: FfKind::Ff,
            embedding_kind: EmbeddingKind::Full,
            gate: GateKind::None,
            share_embeddings: false,
            patt_enabled: true,
            ff_enabled: true,
            tc_plan: TcPlanMap::default(),
            l_sp: 2,
            n_sp: 16,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "d_model",
    "n",
    "d_h",
    "d_ff",
    "p_dropout",
    "n_vocab",
    "ff_kind",
    "embedding_kind",
    "gate",
    "share_embeddings",
    "patt_enabled",
    "ff_enabled",
    "tc_plan",
    "l_sp",
    "n_sp",
];

impl ArchConfig {
    pub fn d_ff(&self) -> usize {
        self.d_ff_override.unwrap_or(4 * self.d_model)
    }

    /// GEGLU hidden width, chosen for parameter parity with the two-matrix
    /// feed-forward: round(2 * d_ff / 3).
    pub fn d_geglu(&self) -> usize {
        (2.0 * self.d_ff() as f64 / 3.0).round() as usize
    }

    pub fn hsoftpos(&self) -> Result<HSoftPosConfig> {
        HSoftPosConfig::new(self.d_model, self.n_vocab, self.l_sp, self.n_sp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n == 0 || self.d_h == 0 {
            return Err(Error::config("d_model, n, and d_h must be positive"));
        }
        if self.d_model % self.d_h != 0 {
            return Err(Error::config(format!(
                "d_model {} must be divisible by d_h {}",
                self.d_model, self.d_h
            )));
        }
        if !(0.0..1.0).contains(&self.p_dropout) {
            return Err(Error::config(format!(
                "p_dropout {} must lie in [0, 1)",
                self.p_dropout
            )));
        }
        if self.n_vocab < 2 {
            return Err(Error::config("n_vocab must be at least 2"));
        }
        if self.d_ff() == 0 || (self.ff_kind == FfKind::Geglu && self.d_geglu() == 0) {
            return Err(Error::config("feed-forward width must be positive"));
        }
        if self.share_embeddings {
            if self.embedding_kind != EmbeddingKind::Full {
                return Err(Error::config(
                    "share_embeddings requires embedding_kind = full \
                     (width parity with the output projection)",
                ));
            }
            if self.tc_plan.emb.is_some() || self.tc_plan.output.is_some() {
                return Err(Error::config(
                    "share_embeddings cannot combine with tc_plan emb/output placements: \
                     the shared tensor would be factorized on every use",
                ));
            }
        }
        if self.embedding_kind == EmbeddingKind::HSoftPos {
            self.hsoftpos()?;
            if self.tc_plan.emb.is_some() {
                return Err(Error::config(
                    "tc_plan emb placement requires embedding_kind = full",
                ));
            }
        }
        for (name, entry) in [
            ("emb", self.tc_plan.emb),
            ("ff", self.tc_plan.ff),
            ("patt", self.tc_plan.patt),
            ("output", self.tc_plan.output),
        ] {
            if let Some(e) = entry {
                if !(e.r > 0.0 && e.r <= 1.0) {
                    return Err(Error::config(format!(
                        "tc_plan {name} ratio {} must lie in (0, 1]",
                        e.r
                    )));
                }
                if e.n < 2 {
                    return Err(Error::config(format!(
                        "tc_plan {name} chain length {} must be at least 2",
                        e.n
                    )));
                }
            }
        }
        Ok(())
    }

    /// Applies one `key=value` override. Unknown keys are rejected with the
    /// full key list.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str, key: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::config(format!("{key} expects an integer, got {v:?}")))
        };
        let parse_bool = |v: &str, key: &str| -> Result<bool> {
            match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::config(format!(
                    "{key} expects true or false, got {v:?}"
                ))),
            }
        };
        match key {
            "d_model" => self.d_model = parse_usize(value, key)?,
            "n" | "N" => self.n = parse_usize(value, key)?,
            "d_h" => self.d_h = parse_usize(value, key)?,
            "d_ff" => self.d_ff_override = Some(parse_usize(value, key)?),
            "p_dropout" => {
                self.p_dropout = value.parse().map_err(|_| {
                    Error::config(format!("p_dropout expects a number, got {value:?}"))
                })?
            }
            "n_vocab" => self.n_vocab = parse_usize(value, key)?,
            "ff_kind" => self.ff_kind = FfKind::parse(value)?,
            "embedding_kind" => self.embedding_kind = EmbeddingKind::parse(value)?,
            "gate" => self.gate = GateKind::parse(value)?,
            "share_embeddings" => self.share_embeddings = parse_bool(value, key)?,
            "patt_enabled" => self.patt_enabled = parse_bool(value, key)?,
            "ff_enabled" => self.ff_enabled = parse_bool(value, key)?,
            "tc_plan" => self.tc_plan = TcPlanMap::parse(value)?,
            "l_sp" => self.l_sp = parse_usize(value, key)?,
            "n_sp" => self.n_sp = parse_usize(value, key)?,
            other => {
                return Err(Error::config(format!(
                    "unknown config key {other:?}; known keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses a flat key=value file; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<ArchConfig> {
        let text = std::fs::read_to_string(path)?;
        ArchConfig::from_str_body(&text)
    }

    pub fn from_str_body(text: &str) -> Result<ArchConfig> {
        let mut cfg = ArchConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(format!(
                    "line {}: expected key = value, got {raw:?}",
                    i + 1
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Canonical key=value serialization (round-trips through
    /// `from_str_body`).
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("d_model = {}\n", self.d_model));
        out.push_str(&format!("n = {}\n", self.n));
        out.push_str(&format!("d_h = {}\n", self.d_h));
        out.push_str(&format!("d_ff = {}\n", self.d_ff()));
        out.push_str(&format!("p_dropout = {}\n", self.p_dropout));
        out.push_str(&format!("n_vocab = {}\n", self.n_vocab));
        out.push_str(&format!("ff_kind = {}\n", self.ff_kind.name()));
        out.push_str(&format!("embedding_kind = {}\n", self.embedding_kind.name()));
        out.push_str(&format!("gate = {}\n", self.gate.name()));
        out.push_str(&format!("share_embeddings = {}\n", self.share_embeddings));
        out.push_str(&format!("patt_enabled = {}\n", self.patt_enabled));
        out.push_str(&format!("ff_enabled = {}\n", self.ff_enabled));
        out.push_str(&format!("tc_plan = {}\n", self.tc_plan.serialize()));
        out.push_str(&format!("l_sp = {}\n", self.l_sp));
        out.push_str(&format!("n_sp = {}\n", self.n_sp));
        out
    }
}

/// Preset names, one per reference table row.
pub const PRESET_NAMES: &[&str] = &[
    "transformer-shared",
    "b",
    "b-prime",
    "b-prime-kgv",
    "anthe-no-tc",
    "tc-emb-0.2",
    "tc-emb-0.8",
    "tc-ff-0.1",
    "tc-layer-0.1",
    "tc-layer-0.2",
    "tc-layer-0.8",
    "tc-output-0.2",
    "tc-output-0.8",
    "anthe",
    "anthe-no-patt",
    "anthe-no-ff",
    "anthe-no-patt-no-ff",
    "anthe-small",
];

/// Builds a named preset.
///
/// The `tc-*` ablations start from the full-embedding B' + KgV baseline;
/// `tc-ff-0.1` and `tc-layer-0.1` start from its H-SoftPOS variant, matching
/// the rows they reproduce.
pub fn preset(name: &str) -> Result<ArchConfig> {
    let mut cfg = ArchConfig::default();
    let tc = |r: f64| Some(TcEntry { r, n: 2 });
    match name {
        "transformer-shared" => {
            cfg.share_embeddings = true;
        }
        "b" => {}
        "b-prime" => {
            cfg.ff_kind = FfKind::Geglu;
        }
        "b-prime-kgv" => {
            cfg.ff_kind = FfKind::Geglu;
            cfg.gate = GateKind::KgV;
        }
        "anthe-no-tc" => {
            cfg.ff_kind = FfKind::Geglu;
            cfg.gate = GateKind::KgV;
            cfg.embedding_kind = EmbeddingKind::HSoftPos;
        }
        "tc-emb-0.2" | "tc-emb-0.8" | "tc-layer-0.2" | "tc-layer-0.8" | "tc-output-0.2"
        | "tc-output-0.8" => {
            cfg.ff_kind = FfKind::Geglu;
            cfg.gate = GateKind::KgV;
            let r: f64 = name.rsplit('-').next().unwrap().parse().unwrap();
            match &name[3..name.len() - 4] {
                "emb" => cfg.tc_plan.emb = tc(r),
                "layer" => {
                    cfg.tc_plan.ff = tc(r);
                    cfg.tc_plan.patt = tc(r);
                }
                "output" => cfg.tc_plan.output = tc(r),
                _ => unreachable!(),
            }
        }
        "tc-ff-0.1" => {
            cfg.ff_kind = FfKind::Geglu;
            cfg.gate = GateKind::KgV;
            cfg.embedding_kind = EmbeddingKind::HSoftPos;
            cfg.tc_plan.ff = tc(0.1);
        }
        "tc-layer-0.1" => {
            cfg.ff_kind = FfKind::Geglu;
            cfg.gate = GateKind::KgV;
            cfg.embedding_kind = EmbeddingKind::HSoftPos;
            cfg.tc_plan.ff = tc(0.1);
            cfg.tc_plan.patt = tc(0.1);
        }
        "anthe" | "anthe-no-patt" | "anthe-no-ff" | "anthe-no-patt-no-ff" | "anthe-small" => {
            cfg.ff_kind = FfKind::Geglu;
            cfg.gate = GateKind::KgV;
            cfg.embedding_kind = EmbeddingKind::HSoftPos;
            cfg.tc_plan.ff = tc(0.005);
            cfg.tc_plan.patt = tc(0.07);
            if name.contains("no-patt") {
                cfg.patt_enabled = false;
            }
            if name.contains("no-ff") {
                cfg.ff_enabled = false;
            }
            if name == "anthe-small" {
                cfg.d_model = 64;
                cfg.n = 2;
                cfg.d_h = 4;
            }
        }
        other => {
            return Err(Error::config(format!(
                "unknown preset {other:?}; available: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
