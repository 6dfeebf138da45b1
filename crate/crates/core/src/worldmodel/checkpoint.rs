//! Text checkpoints: header line, environment block, model settings, then one
//! `name shape values...` line per array.

use std::collections::BTreeMap;
use std::path::Path;

use super::model::{ModelConfig, WorldModel};
use crate::envsim::EnvDescriptor;
use crate::numkit::{RandomSource, Tensor};

pub const CHECKPOINT_HEADER: &str = "MCGCKPT v1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint version mismatch: expected {expected:?}, found {found:?}")]
    Version { expected: String, found: String },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint malformed: {0}")]
    Malformed(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn save(model: &WorldModel, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_text(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<WorldModel, CheckpointError> {
    from_text(&std::fs::read_to_string(path)?)
}

fn shape_str(t: &Tensor) -> String {
    t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn array_line(out: &mut String, name: &str, t: &Tensor) {
    out.push_str(name);
    out.push(' ');
    out.push_str(&shape_str(t));
    for v in t.data() {
        out.push(' ');
        out.push_str(&format!("{v:?}"));
    }
    out.push('\n');
}

fn named_arrays(model: &WorldModel) -> Vec<(String, Tensor)> {
    let mut v = Vec::new();
    for (l, layer) in model.encoder.layers.iter().enumerate() {
        v.push((format!("encoder.{l}.weight"), layer.weight.clone()));
        v.push((format!("encoder.{l}.bias"), layer.bias.clone()));
    }
    v.push(("codebook".into(), model.codebook.clone()));
    for (l, layer) in model.decoder.layers.iter().enumerate() {
        v.push((format!("decoder.{l}.weight"), layer.weight.clone()));
        v.push((format!("decoder.{l}.bias"), layer.bias.clone()));
    }
    for (j, np) in model.predictors.iter().enumerate() {
        v.push((format!("predictor.{j}.w_par"), np.w_par.clone()));
        v.push((format!("predictor.{j}.w_ctx"), np.w_ctx.clone()));
        v.push((format!("predictor.{j}.b1"), np.b1.clone()));
        v.push((format!("predictor.{j}.w_out"), np.w_out.clone()));
        v.push((format!("predictor.{j}.b_out"), np.b_out.clone()));
    }
    let counters = |c: &[u64]| Tensor::vector(c.iter().map(|&x| x as f64).collect());
    v.push(("usage".into(), counters(&model.usage)));
    v.push(("last_used".into(), counters(&model.last_used)));
    v
}

fn config_lines(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("codebook_size", c.codebook_size.to_string()),
        ("embed_dim", c.embed_dim.to_string()),
        ("hidden", c.hidden.to_string()),
        ("lambda_sparse", format!("{:?}", c.lambda_sparse)),
        ("lambda_mask", format!("{:?}", c.lambda_mask)),
        ("lambda_quant", format!("{:?}", c.lambda_quant)),
        ("beta", format!("{:?}", c.beta)),
        ("temp_start", format!("{:?}", c.temp_start)),
        ("temp_end", format!("{:?}", c.temp_end)),
        ("fusion_cos", format!("{:?}", c.fusion_cos)),
        ("fusion_l1_frac", format!("{:?}", c.fusion_l1_frac)),
        ("fusion_every", c.fusion_every.to_string()),
        ("dead_after", c.dead_after.to_string()),
        ("codebook_init", format!("{:?}", c.codebook_init)),
    ]
}

pub fn to_text(model: &WorldModel) -> String {
    let mut out = format!("{CHECKPOINT_HEADER}\n[env]\n");
    if let Some(env) = &model.env {
        out.push_str(&env.to_text());
    }
    out.push_str("[model]\n");
    let cards: Vec<String> = model.cards().iter().map(|c| c.to_string()).collect();
    out.push_str(&format!("cards = {}\n", cards.join(",")));
    for (k, v) in config_lines(&model.config) {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out.push_str(&format!("step = {}\n[arrays]\n", model.step));
    for (name, t) in named_arrays(model) {
        array_line(&mut out, &name, &t);
    }
    out.push_str("end\n");
    out
}

pub fn from_text(text: &str) -> Result<WorldModel, CheckpointError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != CHECKPOINT_HEADER {
        return Err(CheckpointError::Version {
            expected: CHECKPOINT_HEADER.into(),
            found: header.into(),
        });
    }
    let mut section = "";
    let mut env_text = String::new();
    let mut settings = BTreeMap::new();
    let mut arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    let mut ended = false;
    for line in lines {
        match line {
            "[env]" | "[model]" | "[arrays]" => {
                section = line;
                continue;
            }
            "end" => {
                ended = true;
                break;
            }
            _ => {}
        }
        match section {
            "[env]" => {
                env_text.push_str(line);
                env_text.push('\n');
            }
            "[model]" => {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| CheckpointError::Malformed(format!("setting line {line:?}")))?;
                settings.insert(k.trim().to_string(), v.trim().to_string());
            }
            "[arrays]" => {
                let mut parts = line.split(' ');
                let name = parts.next().unwrap_or_default().to_string();
                let shape = parts
                    .next()
                    .ok_or_else(|| CheckpointError::Malformed(format!("array {name} has no shape")))?
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| CheckpointError::Malformed(format!("array {name} shape: {e}")))?;
                let values = parts
                    .map(|v| v.parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| CheckpointError::Malformed(format!("array {name} values: {e}")))?;
                if values.len() != shape.iter().product::<usize>() {
                    return Err(CheckpointError::Truncated(format!(
                        "array {name} holds {} values for shape {shape:?}",
                        values.len()
                    )));
                }
                arrays.insert(name, (shape, values));
            }
            _ => return Err(CheckpointError::Malformed(format!("content before a section: {line:?}"))),
        }
    }
    if !ended {
        return Err(CheckpointError::Truncated("missing end marker".into()));
    }
    let get = |k: &str| {
        settings
            .get(k)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing setting {k}")))
    };
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, CheckpointError>
    where
        T::Err: std::fmt::Display,
    {
        v.parse().map_err(|e| CheckpointError::Malformed(format!("{k}: {e}")))
    }
    let cards = get("cards")?
        .split(',')
        .map(|c| num::<usize>("cards", c))
        .collect::<Result<Vec<_>, _>>()?;
    let config = ModelConfig {
        codebook_size: num("codebook_size", get("codebook_size")?)?,
        embed_dim: num("embed_dim", get("embed_dim")?)?,
        hidden: num("hidden", get("hidden")?)?,
        lambda_sparse: num("lambda_sparse", get("lambda_sparse")?)?,
        lambda_mask: num("lambda_mask", get("lambda_mask")?)?,
        lambda_quant: num("lambda_quant", get("lambda_quant")?)?,
        beta: num("beta", get("beta")?)?,
        temp_start: num("temp_start", get("temp_start")?)?,
        temp_end: num("temp_end", get("temp_end")?)?,
        fusion_cos: num("fusion_cos", get("fusion_cos")?)?,
        fusion_l1_frac: num("fusion_l1_frac", get("fusion_l1_frac")?)?,
        fusion_every: num("fusion_every", get("fusion_every")?)?,
        dead_after: num("dead_after", get("dead_after")?)?,
        codebook_init: num("codebook_init", get("codebook_init")?)?,
    };
    let mut model = WorldModel::new(&cards, config, &mut RandomSource::new(0, "checkpoint-shell"))
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    model.step = num("step", get("step")?)?;
    model.env = if env_text.trim().is_empty() {
        None
    } else {
        Some(EnvDescriptor::parse(&env_text).map_err(|e| CheckpointError::Malformed(e.to_string()))?)
    };
    let expected = named_arrays(&model);
    let mut loaded = Vec::with_capacity(expected.len());
    for (name, t) in &expected {
        let (shape, values) = arrays
            .remove(name)
            .ok_or_else(|| CheckpointError::Truncated(format!("missing array {name}")))?;
        if shape != t.shape() {
            return Err(CheckpointError::Malformed(format!(
                "array {name} has shape {shape:?}, expected {:?}",
                t.shape()
            )));
        }
        loaded.push(Tensor::new(shape, values));
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(CheckpointError::Malformed(format!("unexpected array {extra}")));
    }
    let last_used = loaded.pop().unwrap();
    let usage = loaded.pop().unwrap();
    model.usage = usage.data().iter().map(|&x| x as u64).collect();
    model.last_used = last_used.data().iter().map(|&x| x as u64).collect();
    for (dst, src) in model.params_mut().into_iter().zip(loaded) {
        *dst = src;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> WorldModel {
        let mut m = WorldModel::new(&[2, 3, 2], ModelConfig::default(), &mut RandomSource::new(0, "ckpt")).unwrap();
        m.env = Some(EnvDescriptor::lockbox(4));
        m.step = 17;
        m.usage = vec![1, 2, 3, 4];
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let back = from_text(&to_text(&m)).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_text(&back), to_text(&m));
    }

    #[test]
    fn wrong_version_is_named() {
        let text = to_text(&model()).replacen("MCGCKPT v1", "MCGCKPT v0", 1);
        let err = from_text(&text).unwrap_err().to_string();
        assert!(err.contains("MCGCKPT v1") && err.contains("MCGCKPT v0"), "{err}");
    }

    #[test]
    fn truncation_is_detected() {
        let text = to_text(&model());
        let cut = &text[..text.len() / 2];
        let cut = &cut[..cut.rfind('\n').unwrap() + 1];
        assert!(matches!(from_text(cut), Err(CheckpointError::Truncated(_))));
    }
}
