//! Model checkpoints: a versioned text manifest plus one raw little-endian
//! `f64` file per parameter.
//!
//! ```text
//! gradprom-checkpoint 1
//! role classifier 3
//! channels 1
//! width 16
//! depth 2
//! input 32 32
//! param cls.conv0.weight 16,1,3,3 cls.conv0.weight.f64
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;

use super::{check_params, ModelConfig, ModelError, ParameterSet};

pub const MANIFEST: &str = "manifest.txt";
const MAGIC: &str = "gradprom-checkpoint 1";

pub fn save(dir: &Path, config: &ModelConfig, params: &ParameterSet) -> Result<(), ModelError> {
    check_params(config, params)?;
    fs::create_dir_all(dir)?;
    let mut manifest = format!(
        "{MAGIC}\nrole {}\nchannels {}\nwidth {}\ndepth {}\ninput {} {}\n",
        config.role, config.channels, config.width, config.depth, config.input_hw.0, config.input_hw.1
    );
    for (name, t) in params.iter() {
        let file = format!("{name}.f64");
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("param {name} {} {file}\n", dims.join(",")));
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(file), bytes)?;
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(ModelConfig, ParameterSet), ModelError> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let bad = |m: &str| ModelError::Checkpoint(format!("{}: {m}", dir.display()));
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("missing or unsupported version header"));
    }
    let mut field = |key: &str| -> Result<String, ModelError> {
        let line = lines.next().ok_or_else(|| bad("truncated manifest"))?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(&format!("expected `{key}` line, got {line:?}")))
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad number {s:?}")));
    let role = field("role")?.parse()?;
    let channels = num(&field("channels")?)?;
    let width = num(&field("width")?)?;
    let depth = num(&field("depth")?)?;
    let input = field("input")?;
    let hw: Vec<&str> = input.split_whitespace().collect();
    if hw.len() != 2 {
        return Err(bad("input needs two dimensions"));
    }
    let config = ModelConfig {
        role,
        channels,
        width,
        depth,
        input_hw: (num(hw[0])?, num(hw[1])?),
    };
    config.validate()?;

    let mut entries = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [kw, name, dims, file] = parts[..] else {
            return Err(bad(&format!("malformed param line {line:?}")));
        };
        if kw != "param" || file.contains('/') || file.contains("..") {
            return Err(bad(&format!("malformed param line {line:?}")));
        }
        let shape = dims.split(',').map(num).collect::<Result<Vec<_>, _>>()?;
        let bytes = fs::read(dir.join(file))?;
        if bytes.len() % 8 != 0 {
            return Err(bad(&format!("{file} is not a whole number of f64 values")));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        entries.push((name.to_string(), Tensor::new(&shape, data)?));
    }
    let params = ParameterSet::new(entries)?;
    check_params(&config, &params)?;
    Ok((config, params))
}
