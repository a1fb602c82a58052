//! Run configuration: flat dotted-key JSON with defaults and `--set`
//! overrides.
//!
//! Every key has a default; config files and overrides may only touch known
//! keys, and every command echoes the fully resolved table into a
//! run-manifest JSON so ablation runs are machine-diffable.

use crate::agent::{AblationFlags, AgentConfig};
use crate::error::{Error, Result};
use crate::paf::{PafDims, TrainConfig};
use crate::reasoner::ReasonerWeights;
use crate::world::WorldParams;
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, Value>,
}

fn default_table() -> BTreeMap<String, Value> {
    let mut m = BTreeMap::new();
    let wp = WorldParams::default();
    let ac = AgentConfig::default();
    let rw = ReasonerWeights::default();
    let tc = TrainConfig::default();
    let dims = PafDims::default();
    let mut put = |k: &str, v: Value| {
        m.insert(k.to_string(), v);
    };
    put("seeds.world", Value::from(0u64));
    put("seeds.episode", Value::from(0u64));
    put("seeds.train", Value::from(tc.seed));
    put("seeds.agent", Value::from(ac.seed));
    put("world.vocab", Value::from(wp.vocab));
    put("world.h", Value::from(wp.h));
    put("world.w", Value::from(wp.w));
    put("world.c", Value::from(wp.c));
    put("world.nodes", Value::from(wp.nodes));
    put("world.room_radius", Value::from(wp.room_radius));
    put("episodes.min_path_len", Value::from(4.0));
    put("scheduler.tau_u", Value::from(ac.tau_u));
    put("scheduler.tau_s", Value::from(ac.tau_s));
    put("scheduler.alpha", Value::from(ac.alpha));
    put("scheduler.window", Value::from(ac.window));
    put("reasoner.w_similarity", Value::from(rw.w_similarity));
    put("reasoner.w_attention", Value::from(rw.w_attention));
    put("reasoner.w_entity", Value::from(rw.w_entity));
    put("reasoner.w_revisit", Value::from(rw.w_revisit));
    put("reasoner.stop_base", Value::from(rw.stop_base));
    put("reasoner.w_stop", Value::from(rw.w_stop));
    put("reasoner.temperature", Value::from(rw.temperature));
    put("agent.max_steps", Value::from(ac.max_steps));
    put("agent.no_imagination", Value::from(false));
    put("agent.no_filter", Value::from(false));
    put("agent.no_ais", Value::from(false));
    put("agent.no_cot", Value::from(false));
    put("train.lr", Value::from(tc.lr));
    put("train.epochs", Value::from(tc.epochs));
    put("train.batch", Value::from(tc.batch));
    put("train.patience", Value::from(tc.patience));
    put("paf.d", Value::from(dims.d));
    put("paf.heads", Value::from(dims.n_heads));
    put("backend.kind", Value::from("builtin"));
    put("backend.command", Value::from(""));
    put("backend.address", Value::from(""));
    m
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: default_table() }
    }
}

impl RunConfig {
    /// Defaults overlaid with a flat JSON object from `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        let parsed: BTreeMap<String, Value> = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("config {}: {e}", path.display())))?;
        for (k, v) in parsed {
            cfg.set_value(&k, v)?;
        }
        Ok(cfg)
    }

    /// Apply one `key=value` override; the value is parsed as JSON when
    /// possible and taken as a string otherwise.
    pub fn apply_set(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set needs key=value, got {spec:?}")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::from(v));
        self.set_value(k, value)
    }

    fn set_value(&mut self, key: &str, value: Value) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.values
            .get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Config(format!("{key} must be a non-negative integer")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        Ok(self.get_u64(key)? as usize)
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.values
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Config(format!("{key} must be a number")))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        self.values
            .get(key)
            .and_then(Value::as_bool)
            .ok_or_else(|| Error::Config(format!("{key} must be a boolean")))
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Config(format!("{key} must be a string")))
    }

    pub fn world_params(&self) -> Result<WorldParams> {
        let p = WorldParams {
            vocab: self.get_usize("world.vocab")?,
            h: self.get_usize("world.h")?,
            w: self.get_usize("world.w")?,
            c: self.get_usize("world.c")?,
            nodes: self.get_usize("world.nodes")?,
            room_radius: self.get_f64("world.room_radius")?,
            seed: self.get_u64("seeds.world")?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn ablation_flags(&self) -> Result<AblationFlags> {
        Ok(AblationFlags {
            no_imagination: self.get_bool("agent.no_imagination")?,
            no_filter: self.get_bool("agent.no_filter")?,
            no_ais: self.get_bool("agent.no_ais")?,
            no_cot: self.get_bool("agent.no_cot")?,
        })
    }

    pub fn reasoner_weights(&self) -> Result<ReasonerWeights> {
        Ok(ReasonerWeights {
            w_similarity: self.get_f64("reasoner.w_similarity")?,
            w_attention: self.get_f64("reasoner.w_attention")?,
            w_entity: self.get_f64("reasoner.w_entity")?,
            w_revisit: self.get_f64("reasoner.w_revisit")?,
            stop_base: self.get_f64("reasoner.stop_base")?,
            w_stop: self.get_f64("reasoner.w_stop")?,
            temperature: self.get_f64("reasoner.temperature")?,
        })
    }

    pub fn agent_config(&self) -> Result<AgentConfig> {
        Ok(AgentConfig {
            max_steps: self.get_usize("agent.max_steps")?,
            tau_u: self.get_f64("scheduler.tau_u")?,
            tau_s: self.get_f64("scheduler.tau_s")?,
            alpha: self.get_f64("scheduler.alpha")?,
            window: self.get_usize("scheduler.window")?,
            weights: self.reasoner_weights()?,
            ablation: self.ablation_flags()?,
            seed: self.get_u64("seeds.agent")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let dims = PafDims {
            c: self.get_usize("world.c")?,
            d: self.get_usize("paf.d")?,
            n_heads: self.get_usize("paf.heads")?,
        };
        dims.validate()?;
        Ok(TrainConfig {
            lr: self.get_f64("train.lr")?,
            epochs: self.get_usize("train.epochs")?,
            batch: self.get_usize("train.batch")?,
            patience: self.get_usize("train.patience")?,
            seed: self.get_u64("seeds.train")?,
            dims,
        })
    }

    /// Fully resolved flat table, stable key order.
    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.values).expect("flat table serializes")
    }

    /// Write the resolved config next to a command's outputs.
    pub fn write_manifest(&self, dir: &Path, command: &str) -> Result<()> {
        let mut table = self.values.clone();
        table.insert("command".to_string(), Value::from(command));
        let text = serde_json::to_string_pretty(&table).expect("flat table serializes");
        std::fs::write(dir.join(format!("{command}.manifest.json")), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_to_typed_configs() {
        let cfg = RunConfig::default();
        let wp = cfg.world_params().unwrap();
        assert_eq!(wp, WorldParams::default());
        let ac = cfg.agent_config().unwrap();
        assert_eq!(ac.max_steps, 20);
        assert_eq!(ac.tau_u, 0.5);
        let tc = cfg.train_config().unwrap();
        assert_eq!(tc.lr, 1e-2);
        assert_eq!(tc.epochs, 12);
        assert_eq!(cfg.get_str("backend.kind").unwrap(), "builtin");
    }

    #[test]
    fn set_overrides_and_rejects_unknown_keys() {
        let mut cfg = RunConfig::default();
        cfg.apply_set("agent.max_steps=7").unwrap();
        assert_eq!(cfg.get_usize("agent.max_steps").unwrap(), 7);
        cfg.apply_set("agent.no_filter=true").unwrap();
        assert!(cfg.ablation_flags().unwrap().no_filter);
        cfg.apply_set("backend.kind=exec").unwrap();
        assert_eq!(cfg.get_str("backend.kind").unwrap(), "exec");
        assert!(cfg.apply_set("agent.bogus=1").is_err());
        assert!(cfg.apply_set("no-equals-sign").is_err());
    }

    #[test]
    fn load_merges_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"world.nodes": 24, "scheduler.tau_u": 0.4}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.world_params().unwrap().nodes, 24);
        assert_eq!(cfg.agent_config().unwrap().tau_u, 0.4);
        // untouched keys keep defaults
        assert_eq!(cfg.get_usize("agent.max_steps").unwrap(), 20);

        std::fs::write(&path, r#"{"nope": 1}"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
        assert!(RunConfig::load(&dir.path().join("missing.json")).is_err());
    }

    #[test]
    fn manifest_roundtrip_is_stable() {
        let mut cfg = RunConfig::default();
        cfg.apply_set("seeds.agent=42").unwrap();
        let m1 = cfg.manifest_json();
        let parsed: BTreeMap<String, Value> = serde_json::from_str(&m1).unwrap();
        let mut cfg2 = RunConfig::default();
        for (k, v) in parsed {
            cfg2.set_value(&k, v).unwrap();
        }
        assert_eq!(m1, cfg2.manifest_json());
    }

    #[test]
    fn write_manifest_includes_command() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        cfg.write_manifest(dir.path(), "run").unwrap();
        let text = std::fs::read_to_string(dir.path().join("run.manifest.json")).unwrap();
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["command"], "run");
        assert_eq!(v["agent.max_steps"], 20);
    }
}
