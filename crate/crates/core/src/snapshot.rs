//! Persisted repositories and trained networks.
//!
//! A model snapshot is a directory holding `model.json` (dimensions, training
//! configuration including the seed, and history) next to one tensor file per
//! parameter and per Adam moment. A repository snapshot is `repository.npy`
//! (`M x C`) plus `repository_provenance.csv` with one `sample_id,row,col`
//! line per row.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{AdamState, MlpParams, TrainConfig, TrainHistory};
use crate::selector::{Provenance, Repository};
use crate::tensor::{read_array, write_array};

const PARAM_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub adam_step: u64,
    pub train_config: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub history: Option<TrainHistory>,
}

fn shapes(p: &MlpParams<f32>) -> [Vec<usize>; 4] {
    [
        vec![p.hidden, p.input],
        vec![p.hidden],
        vec![p.output, p.hidden],
        vec![p.output],
    ]
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn save_model(
    dir: impl AsRef<Path>,
    params: &MlpParams<f32>,
    train_config: &TrainConfig,
    history: Option<&TrainHistory>,
) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let info = ModelInfo {
        input: params.input,
        hidden: params.hidden,
        output: params.output,
        adam_step: params.adam.step,
        train_config: *train_config,
        history: history.cloned(),
    };
    let json = serde_json::to_string_pretty(&info).expect("model info serializes") + "\n";
    let path = dir.join("model.json");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

    let shapes = shapes(params);
    for (i, name) in PARAM_NAMES.iter().enumerate() {
        write_array(dir.join(format!("{name}.npy")), &shapes[i], params.tensors()[i])?;
        write_array(dir.join(format!("adam_m_{name}.npy")), &shapes[i], &params.adam.first[i])?;
        write_array(dir.join(format!("adam_v_{name}.npy")), &shapes[i], &params.adam.second[i])?;
    }
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<(MlpParams<f32>, ModelInfo)> {
    let dir = dir.as_ref();
    let path = dir.join("model.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let info: ModelInfo = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;

    let mut params = MlpParams::<f32>::zeros(info.input, info.hidden, info.output);
    let shapes = shapes(&params);
    let load = |file: String, shape: &[usize]| -> Result<Vec<f32>> {
        let array = read_array(dir.join(&file))?;
        if array.shape != shape {
            return Err(Error::Format(format!(
                "{file}: expected shape {shape:?}, found {:?}",
                array.shape
            )));
        }
        Ok(array.data)
    };
    let mut first: [Vec<f32>; 4] = Default::default();
    let mut second: [Vec<f32>; 4] = Default::default();
    for (i, name) in PARAM_NAMES.iter().enumerate() {
        *params.tensors_mut()[i] = load(format!("{name}.npy"), &shapes[i])?;
        first[i] = load(format!("adam_m_{name}.npy"), &shapes[i])?;
        second[i] = load(format!("adam_v_{name}.npy"), &shapes[i])?;
    }
    params.adam = AdamState {
        step: info.adam_step,
        first,
        second,
    };
    Ok((params, info))
}

pub fn save_repository(dir: impl AsRef<Path>, repo: &Repository) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    write_array(dir.join("repository.npy"), &[repo.len(), repo.dim()], repo.data())?;
    let path = dir.join("repository_provenance.csv");
    let mut writer = csv::Writer::from_path(&path)
        .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    let csv_err = |e: csv::Error| Error::io(&path, std::io::Error::other(e));
    writer.write_record(["sample_id", "row", "col"]).map_err(csv_err)?;
    for p in repo.provenance() {
        writer
            .write_record([
                repo.sample_ids()[p.sample].as_str(),
                &p.row.to_string(),
                &p.col.to_string(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::io(&path, e))
}

pub fn load_repository(dir: impl AsRef<Path>) -> Result<Repository> {
    let dir = dir.as_ref();
    let array = read_array(dir.join("repository.npy"))?;
    let [rows, dim] = array.shape[..] else {
        return Err(Error::Format(format!(
            "repository.npy must be rank 2, found shape {:?}",
            array.shape
        )));
    };

    let path = dir.join("repository_provenance.csv");
    let mut reader = csv::Reader::from_path(&path)
        .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    let mut sample_ids: Vec<String> = Vec::new();
    let mut provenance = Vec::with_capacity(rows);
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let field = |i: usize| record.get(i).unwrap_or_default();
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("{}: bad index {s:?}", path.display())))
        };
        let id = field(0);
        // Rows of one sample are contiguous, so checking the last id suffices.
        let sample = match sample_ids.last() {
            Some(last) if last == id => sample_ids.len() - 1,
            _ => {
                sample_ids.push(id.to_string());
                sample_ids.len() - 1
            }
        };
        provenance.push(Provenance {
            sample,
            row: parse(field(1))?,
            col: parse(field(2))?,
        });
    }
    if provenance.len() != rows {
        return Err(Error::Format(format!(
            "{} provenance lines for {rows} repository rows",
            provenance.len()
        )));
    }
    Repository::new(dim, array.data, provenance, sample_ids)
}
