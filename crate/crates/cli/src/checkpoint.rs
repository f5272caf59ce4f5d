//! JSON checkpoint files.
//!
//! The document is [`ModelCheckpoint`] verbatim: `version`, `layer_dims`,
//! per-layer row-major `weight` (`out × in`) and `bias` arrays, an optional
//! `head`, and a `metadata` block. Floats are written in shortest
//! round-trip form, so loading reproduces every parameter bit for bit.

use std::path::Path;

use dualtune_core::model::{CheckpointMeta, Model, ModelCheckpoint};

use crate::error::{CliError, Result};
use crate::output::write_json;

pub fn save(model: &Model, meta: CheckpointMeta, path: &Path) -> Result<()> {
    write_json(path, &model.to_checkpoint(meta))
}

pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let ck: ModelCheckpoint = serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: format!("corrupt checkpoint: {e}"),
    })?;
    let model = Model::from_checkpoint(&ck)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    Ok((model, ck.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dualtune_core::train::{init_model, Arch, Supervision};
    use dualtune_core::Tensor;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        for sup in [
            Supervision::Softmax,
            Supervision::Triplet,
            Supervision::Circle,
        ] {
            let model = init_model(5, &Arch::new(&[7], 3), &[1, 4, 6], sup, 11).unwrap();
            let meta = CheckpointMeta {
                seed: 11,
                supervision: sup.name().into(),
                ..Default::default()
            };
            save(&model, meta.clone(), &path).unwrap();
            let (back, m) = load(&path).unwrap();
            assert_eq!(back, model);
            assert_eq!(m, meta);
            let x = Tensor::matrix(2, 5, (0..10).map(|i| (i as f64).sin()).collect()).unwrap();
            let (a, b) = (model.embed(&x).unwrap(), back.embed(&x).unwrap());
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let model = init_model(4, &Arch::new(&[3], 2), &[0, 1], Supervision::Softmax, 1).unwrap();
        save(&model, CheckpointMeta::default(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();

        std::fs::write(&path, text.replacen("\"version\": 1", "\"version\": 9", 1)).unwrap();
        assert!(matches!(load(&path), Err(CliError::Validation(m)) if m.contains("version 9")));

        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load(&path), Err(CliError::Parse { .. })));

        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut v = v;
        v["layer_dims"] = serde_json::json!([4, 5, 2]);
        std::fs::write(&path, v.to_string()).unwrap();
        assert!(matches!(load(&path), Err(CliError::Validation(_))));
    }
}
