use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::netpbm::{read_pgm, read_ppm, write_pgm, write_ppm};
use super::synthetic::{generate_shapes_dataset, SyntheticSpec};
use super::{Sample, DEFAULT_IGNORE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub labels: String,
}

/// Contents of `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub class_count: usize,
    pub ignore: u8,
    pub channel_means: Vec<f64>,
    pub samples: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_count: usize,
    pub ignore: u8,
    pub channel_means: Vec<f64>,
    pub samples: Vec<Sample>,
}

/// Per-channel mean over all pixels of all images.
pub fn channel_means(samples: &[Sample]) -> Vec<f64> {
    let mut sums = [0.0f64; 3];
    let mut count = 0usize;
    for s in samples {
        let plane = s.height() * s.width();
        for (c, sum) in sums.iter_mut().enumerate() {
            *sum += s.image.data()[c * plane..(c + 1) * plane].iter().sum::<f64>();
        }
        count += plane;
    }
    sums.iter().map(|s| if count == 0 { 0.5 } else { s / count as f64 }).collect()
}

impl Dataset {
    pub fn new(class_count: usize, ignore: u8, samples: Vec<Sample>) -> Self {
        let channel_means = channel_means(&samples);
        Dataset {
            class_count,
            ignore,
            channel_means,
            samples,
        }
    }

    pub fn synthetic(spec: &SyntheticSpec) -> Result<Self> {
        Ok(Dataset::new(spec.class_count, DEFAULT_IGNORE, generate_shapes_dataset(spec)?))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks that every label is a class index or the ignore value.
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            if s.image.shape() != [1, 3, s.height(), s.width()] {
                return Err(Error::InvalidShape {
                    shape: s.image.shape().to_vec(),
                    reason: format!("sample {}: image does not match its {}x{} labels", s.id, s.height(), s.width()),
                });
            }
            if let Some(&bad) = s.labels.data.iter().find(|&&v| v != self.ignore && v as usize >= self.class_count) {
                return Err(Error::validation(
                    format!("labels/{}", s.id),
                    format!("label {} outside 0..{}", bad, self.class_count),
                ));
            }
        }
        Ok(())
    }

    pub fn manifest(&self, synthetic: Option<SyntheticSpec>) -> Manifest {
        Manifest {
            class_count: self.class_count,
            ignore: self.ignore,
            channel_means: self.channel_means.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| ManifestEntry {
                    id: s.id.clone(),
                    image: format!("images/{}.ppm", s.id),
                    labels: format!("labels/{}.pgm", s.id),
                })
                .collect(),
            synthetic,
        }
    }

    /// Writes `images/ID.ppm`, `labels/ID.pgm` and `manifest.json` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, synthetic: Option<SyntheticSpec>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["images", "labels"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let manifest = self.manifest(synthetic);
        for (s, entry) in self.samples.iter().zip(&manifest.samples) {
            write_ppm(&s.image, dir.join(&entry.image))?;
            write_pgm(&s.labels, dir.join(&entry.labels))?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let manifest: Manifest = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: format!("{}: {}", path.display(), e.path()),
            message: e.inner().to_string(),
        })?;
        let samples = manifest
            .samples
            .iter()
            .map(|entry| {
                Ok(Sample {
                    id: entry.id.clone(),
                    image: read_ppm(dir.join(&entry.image))?,
                    labels: read_pgm(dir.join(&entry.labels))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset {
            class_count: manifest.class_count,
            ignore: manifest.ignore,
            channel_means: manifest.channel_means,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }
}
