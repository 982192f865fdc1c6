//! Run configuration: one TOML file describing the generator, the
//! discriminator, the training schedule, and the dataset.
//!
//! The merged configuration (file plus command line overrides) is
//! serialized back to TOML and embedded in every checkpoint, so a
//! checkpoint alone is enough to rebuild the networks that wrote it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pixelfold::data::{load_png_folder, synth_blobs, synth_textures, Dataset};
use pixelfold::discriminator::DiscriminatorConfig;
use pixelfold::generator::GeneratorConfig;
use pixelfold::scalar::Scalar;
use pixelfold::training::TrainConfig;
use pixelfold::{Error, Result};

/// Where run outputs land. `dir` is the run root; checkpoints, samples,
/// logs, and reports go into fixed subdirectories underneath it.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

/// Training data source. Synthetic sets are generated on the fly from
/// their seed; a folder is read as PNG files, center cropped and resized
/// to the discriminator resolution.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs {
        count: usize,
        #[serde(default)]
        seed: u64,
    },
    Textures {
        count: usize,
        #[serde(default)]
        seed: u64,
    },
    Folder { path: PathBuf },
}

impl DatasetSpec {
    pub fn build<T: Scalar>(&self, resolution: usize) -> Result<Dataset<T>> {
        match self {
            DatasetSpec::Blobs { count, seed } => synth_blobs(*count, resolution, *seed),
            DatasetSpec::Textures { count, seed } => synth_textures(*count, resolution, *seed),
            DatasetSpec::Folder { path } => load_png_folder(path, resolution),
        }
    }
}

/// Everything one run needs, mirroring the TOML sections.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_blob(blob: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(blob)
            .map_err(|e| Error::Config(format!("checkpoint config is not UTF-8: {e}")))?;
        toml::from_str(text).map_err(|e| Error::Config(format!("checkpoint config: {e}")))
    }

    /// Canonical TOML rendering, used as the checkpoint config blob.
    /// Field order follows the struct, so the same configuration always
    /// produces the same bytes.
    pub fn to_blob(&self) -> Result<Vec<u8>> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization: {e}")))?;
        Ok(text.into_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.train.validate()?;
        if self.generator.final_resolution() != self.discriminator.input_resolution {
            return Err(Error::Config(format!(
                "generator renders {} but the discriminator expects {}",
                self.generator.final_resolution(),
                self.discriminator.input_resolution
            )));
        }
        Ok(())
    }

    pub fn build_dataset<T: Scalar>(&self) -> Result<Dataset<T>> {
        self.dataset.build(self.discriminator.input_resolution)
    }
}

/// Output root precedence: `--out` flag, then `output.dir` from the
/// configuration, then the `PIXELFOLD_OUT` environment variable, then
/// `runs` in the working directory.
pub fn resolve_out_root(flag: Option<PathBuf>, configured: Option<&PathBuf>) -> PathBuf {
    if let Some(p) = flag {
        return p;
    }
    if let Some(p) = configured {
        return p.clone();
    }
    if let Some(p) = std::env::var_os("PIXELFOLD_OUT") {
        return PathBuf::from(p);
    }
    PathBuf::from("runs")
}

/// Fixed layout under the run root.
pub struct RunDirs {
    pub root: PathBuf,
    pub ckpt: PathBuf,
    pub samples: PathBuf,
    pub logs: PathBuf,
    pub reports: PathBuf,
}

impl RunDirs {
    pub fn create(root: PathBuf) -> Result<Self> {
        let dirs = RunDirs {
            ckpt: root.join("ckpt"),
            samples: root.join("samples"),
            logs: root.join("logs"),
            reports: root.join("reports"),
            root,
        };
        for d in [&dirs.ckpt, &dirs.samples, &dirs.logs, &dirs.reports] {
            fs::create_dir_all(d)
                .map_err(|e| Error::Config(format!("cannot create {}: {e}", d.display())))?;
        }
        Ok(dirs)
    }
}
