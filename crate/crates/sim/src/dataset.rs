//! JSON-lines export of samples and client datasets, one sample per line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use pfin_core::synth::{ClientDataset, Modality, Sample};
use serde::{Deserialize, Serialize};

use crate::error::{io_at, Result, SimError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityFlag {
    Multimodal,
    Unimodal,
}

impl From<Modality> for ModalityFlag {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Multimodal => ModalityFlag::Multimodal,
            Modality::Unimodal => ModalityFlag::Unimodal,
        }
    }
}

impl From<ModalityFlag> for Modality {
    fn from(m: ModalityFlag) -> Self {
        match m {
            ModalityFlag::Multimodal => Modality::Multimodal,
            ModalityFlag::Unimodal => Modality::Unimodal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_id: Option<usize>,
    pub modality: ModalityFlag,
    pub z_img: Vec<f64>,
    pub z_txt: Option<Vec<f64>>,
    /// Label bits as 0/1.
    pub labels: Vec<u8>,
    pub true_sigma: f64,
    pub difficulty: f64,
}

impl Record {
    pub fn from_sample(s: &Sample, client: Option<(usize, Modality)>) -> Self {
        let modality = match client {
            Some((_, m)) => m.into(),
            None if s.z_txt.is_some() => ModalityFlag::Multimodal,
            None => ModalityFlag::Unimodal,
        };
        Record {
            client_id: client.map(|(id, _)| id),
            modality,
            z_img: s.z_img.clone(),
            z_txt: s.z_txt.clone(),
            labels: s.labels.iter().map(|&l| u8::from(l)).collect(),
            true_sigma: s.true_sigma,
            difficulty: s.difficulty,
        }
    }

    fn into_sample(self) -> std::result::Result<Sample, String> {
        if self.modality == ModalityFlag::Unimodal && self.z_txt.is_some() {
            return Err("unimodal record carries a text feature".into());
        }
        if self.modality == ModalityFlag::Multimodal && self.z_txt.is_none() {
            return Err("multimodal record has no text feature".into());
        }
        if let Some(t) = &self.z_txt {
            if t.len() != self.z_img.len() {
                return Err(format!("text has {} dims, image has {}", t.len(), self.z_img.len()));
            }
        }
        let labels = self
            .labels
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(format!("label bit {other} is not 0 or 1")),
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(Sample {
            z_img: self.z_img,
            z_txt: self.z_txt,
            labels,
            true_sigma: self.true_sigma,
            difficulty: self.difficulty,
        })
    }
}

fn write_records(path: &Path, records: impl Iterator<Item = Record>) -> Result<()> {
    let file = File::create(path).map_err(io_at(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, &r).map_err(|e| SimError::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(io_at(path))?;
    }
    w.flush().map_err(io_at(path))
}

fn read_records(path: &Path) -> Result<Vec<(Record, Sample)>> {
    let file = File::open(path).map_err(io_at(path))?;
    let mut out = Vec::new();
    let mut width = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_at(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| SimError::format(path, format!("line {}: {msg}", i + 1));
        let record: Record = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let dims = (record.z_img.len(), record.labels.len());
        if *width.get_or_insert(dims) != dims {
            return Err(at(format!("shape {dims:?} differs from earlier lines {:?}", width.unwrap())));
        }
        let sample = record.clone().into_sample().map_err(at)?;
        out.push((record, sample));
    }
    Ok(out)
}

pub fn export_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    write_records(path, samples.iter().map(|s| Record::from_sample(s, None)))
}

pub fn import_samples(path: &Path) -> Result<Vec<Sample>> {
    Ok(read_records(path)?.into_iter().map(|(_, s)| s).collect())
}

pub fn export_clients(path: &Path, clients: &[ClientDataset]) -> Result<()> {
    write_records(
        path,
        clients.iter().flat_map(|c| {
            c.samples
                .iter()
                .map(move |s| Record::from_sample(s, Some((c.client_id, c.modality))))
        }),
    )
}

/// Regroups exported client datasets by `client_id`, in id order.
pub fn import_clients(path: &Path) -> Result<Vec<ClientDataset>> {
    let mut clients: BTreeMap<usize, ClientDataset> = BTreeMap::new();
    for (record, sample) in read_records(path)? {
        let id = record
            .client_id
            .ok_or_else(|| SimError::format(path, "record without client_id in a client export"))?;
        let modality = record.modality.into();
        let entry = clients.entry(id).or_insert_with(|| ClientDataset {
            client_id: id,
            modality,
            samples: Vec::new(),
        });
        if entry.modality != modality {
            return Err(SimError::format(path, format!("client {id} mixes modalities")));
        }
        entry.samples.push(sample);
    }
    Ok(clients.into_values().collect())
}
