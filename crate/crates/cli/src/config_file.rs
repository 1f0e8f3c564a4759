//! `key = value` run configuration, layered under command-line flags.
//!
//! Sections are dotted prefixes: `loop.*` for loop control, `index.*` for
//! chunk geometry, and `actor.*` / `reflector.*` for the two backends.
//! Unknown keys are rejected so typos fail fast. Secrets never live here,
//! only the name of the environment variable that holds them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};

use repoflex_core::actor::SnippetOrder;
use repoflex_core::corpus_index::IndexParams;
use repoflex_core::gateway::{BackendConfig, BackendKind};
use repoflex_core::loop_controller::{FinalPick, LoopConfig, LoopMode};

/// One backend section: the gateway config plus mock-backend wiring.
#[derive(Debug, Clone, Default)]
pub struct RoleBackendConfig {
    pub config: BackendConfig,
    /// JSONL script, resolved relative to the config file.
    pub script: Option<PathBuf>,
    pub sentinel: Option<String>,
    pub wrong_line: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    pub loop_config: LoopConfig,
    pub index_params: IndexParams,
    pub actor: Option<RoleBackendConfig>,
    pub reflector: Option<RoleBackendConfig>,
}

pub fn parse_config_file(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));

    let mut entries: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!(
                "{}:{}: expected `key = value`, got {raw:?}",
                path.display(),
                lineno + 1
            );
        };
        entries.insert(key.trim().to_string(), value.trim().to_string());
    }

    let mut config = FileConfig::default();
    for (key, value) in &entries {
        apply_key(&mut config, key, value, base_dir)
            .with_context(|| format!("{}: key `{key}`", path.display()))?;
    }
    config
        .loop_config
        .validate()
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(config)
}

fn apply_key(config: &mut FileConfig, key: &str, value: &str, base_dir: &Path) -> Result<()> {
    if let Some(rest) = key.strip_prefix("loop.") {
        return apply_loop_key(&mut config.loop_config, rest, value);
    }
    if let Some(rest) = key.strip_prefix("index.") {
        return match rest {
            "window" => set_parsed(&mut config.index_params.window_size, value),
            "stride" => set_parsed(&mut config.index_params.stride, value),
            _ => bail!("unknown config key"),
        };
    }
    if let Some(rest) = key.strip_prefix("actor.") {
        let role = config.actor.get_or_insert_with(RoleBackendConfig::default);
        return apply_backend_key(role, rest, value, base_dir);
    }
    if let Some(rest) = key.strip_prefix("reflector.") {
        let role = config
            .reflector
            .get_or_insert_with(RoleBackendConfig::default);
        return apply_backend_key(role, rest, value, base_dir);
    }
    bail!("unknown config key")
}

fn apply_loop_key(config: &mut LoopConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "max_iterations" => set_parsed(&mut config.max_iterations, value),
        "stagnation_threshold" => set_parsed(&mut config.stagnation_threshold, value),
        "min_improvement" => set_parsed(&mut config.min_improvement, value),
        "target_lines" => set_parsed(&mut config.target_lines, value),
        "top_k" => set_parsed(&mut config.top_k, value),
        "max_suggestion_lines" => set_parsed(&mut config.max_suggestion_lines, value),
        "prompt_budget" => set_parsed(&mut config.prompt_budget, value),
        "prefix_tail_lines" => set_parsed(&mut config.prefix_tail_lines, value),
        "snippet_order" => {
            config.snippet_order = match value {
                "desc" => SnippetOrder::Desc,
                "asc" => SnippetOrder::Asc,
                other => bail!("expected desc|asc, got {other:?}"),
            };
            Ok(())
        }
        "mode" => {
            config.mode = parse_mode(value)?;
            Ok(())
        }
        "final" => {
            config.final_pick = match value {
                "best" => FinalPick::Best,
                "last" => FinalPick::Last,
                other => bail!("expected best|last, got {other:?}"),
            };
            Ok(())
        }
        "blind" => set_bool(&mut config.blind, value),
        _ => bail!("unknown config key"),
    }
}

pub fn parse_mode(value: &str) -> Result<LoopMode> {
    Ok(match value {
        "full" => LoopMode::Full,
        "no-reflect" => LoopMode::NoReflect,
        "no-evaluator" => LoopMode::NoEvaluator,
        other => bail!("expected full|no-reflect|no-evaluator, got {other:?}"),
    })
}

fn apply_backend_key(
    role: &mut RoleBackendConfig,
    key: &str,
    value: &str,
    base_dir: &Path,
) -> Result<()> {
    match key {
        "kind" => {
            role.config.kind = match value {
                "http_chat" => BackendKind::HttpChat,
                "scripted" => BackendKind::Scripted,
                "oracle" => BackendKind::Oracle,
                other => bail!("expected http_chat|scripted|oracle, got {other:?}"),
            };
            Ok(())
        }
        "endpoint_url" => {
            role.config.endpoint_url = Some(value.to_string());
            Ok(())
        }
        "model_name" => {
            role.config.model_name = Some(value.to_string());
            Ok(())
        }
        "api_key_env" => {
            role.config.api_key_env = Some(value.to_string());
            Ok(())
        }
        "timeout_secs" => {
            role.config.timeout = Duration::from_secs(parsed(value)?);
            Ok(())
        }
        "max_retries" => set_parsed(&mut role.config.max_retries, value),
        "retry_backoff_ms" => {
            role.config.retry_backoff = Duration::from_millis(parsed(value)?);
            Ok(())
        }
        "max_concurrent_requests" => set_parsed(&mut role.config.max_concurrent_requests, value),
        "script" => {
            role.script = Some(base_dir.join(value));
            Ok(())
        }
        "sentinel" => {
            role.sentinel = Some(value.to_string());
            Ok(())
        }
        "wrong_line" => {
            role.wrong_line = Some(value.to_string());
            Ok(())
        }
        _ => bail!("unknown config key"),
    }
}

fn parsed<T: std::str::FromStr>(value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("invalid value {value:?}: {e}"))
}

fn set_parsed<T: std::str::FromStr>(slot: &mut T, value: &str) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    *slot = parsed(value)?;
    Ok(())
}

fn set_bool(slot: &mut bool, value: &str) -> Result<()> {
    *slot = match value {
        "true" | "1" | "yes" => true,
        "false" | "0" | "no" => false,
        other => bail!("expected true|false, got {other:?}"),
    };
    Ok(())
}
