use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use asmrag_core::calibrate::CalibrationReport;
use asmrag_core::embedding::ENDPOINT_ENV;
use asmrag_core::explain::GeneratorConfig;
use asmrag_core::ingest::{parse_listing, AddrRange, ListingFormat, RawFunction};
use asmrag_core::{Blocklist, LibFilter, LibIndex, Provider, ProviderConfig, Thresholds};
use clap::Args;

pub const BLOCKLIST_FILE: &str = "blocklist.txt";

/// Embedding provider selection for commands that create new vectors.
#[derive(Debug, Args, Clone)]
pub struct EmbedArgs {
    /// Remote embedding service base URL; the hash encoder is used when unset.
    #[arg(long, env = ENDPOINT_ENV)]
    pub embed_endpoint: Option<String>,
    #[arg(long, default_value = "asm-encoder")]
    pub embed_model: String,
    #[arg(long, default_value_t = 30_000)]
    pub embed_timeout_ms: u64,
    #[arg(long, default_value_t = 2)]
    pub embed_retries: u32,
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    /// Hash encoder seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Hash encoder n-gram width.
    #[arg(long, default_value_t = 2)]
    pub ngram: usize,
}

impl EmbedArgs {
    pub fn config(&self) -> ProviderConfig {
        match &self.embed_endpoint {
            Some(ep) if !ep.is_empty() => ProviderConfig {
                timeout_ms: self.embed_timeout_ms,
                retries: self.embed_retries,
                ..ProviderConfig::remote(ep, &self.embed_model, self.dim)
            },
            _ => ProviderConfig::hash_encoder(self.dim, self.seed, self.ngram),
        }
    }
}

/// Provider stored with a KB, with the endpoint env override applied.
pub fn kb_provider(kb_dir: &Path) -> Result<Provider> {
    let cfg = ProviderConfig::load(kb_dir)
        .with_context(|| format!("reading encoder config of {}", kb_dir.display()))?
        .with_env_override();
    Ok(Provider::from_config(&cfg)?)
}

#[derive(Debug, Args, Clone)]
pub struct ThresholdArgs {
    #[arg(long, default_value_t = 0.70)]
    pub tau_func: f64,
    #[arg(long, default_value_t = 0.15)]
    pub tau_file: f64,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    /// Calibration report whose selected thresholds override the flags.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
}

impl ThresholdArgs {
    pub fn thresholds(&self) -> Result<Thresholds> {
        let mut t = Thresholds {
            tau_func: self.tau_func,
            tau_file: self.tau_file,
            k: self.k,
        };
        if let Some(p) = &self.calibration {
            let report: CalibrationReport = serde_json::from_slice(&std::fs::read(p)?)
                .with_context(|| format!("parsing calibration report {}", p.display()))?;
            (t.tau_func, t.tau_file) = report.selected;
        }
        t.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Args, Clone)]
pub struct LibArgs {
    /// Library index directory (from `libfilter build`).
    #[arg(long)]
    pub lib: Option<PathBuf>,
    #[arg(long, visible_alias = "tau", default_value_t = 0.95)]
    pub tau_lib: f64,
    /// Blocklist file (defaults to blocklist.txt in the library directory).
    #[arg(long)]
    pub blocklist: Option<PathBuf>,
}

pub struct LoadedLib {
    pub index: Option<LibIndex>,
    pub blocklist: Option<Blocklist>,
    pub tau_lib: f64,
}

impl LibArgs {
    pub fn load(&self) -> Result<LoadedLib> {
        let index = match &self.lib {
            Some(dir) => {
                Some(LibIndex::load(dir).with_context(|| format!("loading library index {}", dir.display()))?)
            }
            None => None,
        };
        let blocklist = match self.blocklist_path() {
            Some(p) => Some(
                Blocklist::parse(&std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
            ),
            None => None,
        };
        Ok(LoadedLib {
            index,
            blocklist,
            tau_lib: self.tau_lib,
        })
    }

    pub fn blocklist_path(&self) -> Option<PathBuf> {
        if let Some(p) = &self.blocklist {
            return Some(p.clone());
        }
        self.lib.as_ref().map(|d| d.join(BLOCKLIST_FILE)).filter(|p| p.is_file())
    }
}

impl LoadedLib {
    pub fn filter(&self) -> LibFilter<'_> {
        LibFilter {
            lib: self.index.as_ref(),
            blocklist: self.blocklist.as_ref(),
            tau_lib: self.tau_lib,
        }
    }
}

#[derive(Debug, Args, Clone)]
pub struct GeneratorArgs {
    /// Explanation generator; defaults to `remote` when an endpoint is set.
    #[arg(long, value_enum)]
    pub generator: Option<GeneratorChoice>,
    /// Generation service base URL.
    #[arg(long, env = "ASMRAG_GEN_ENDPOINT")]
    pub gen_endpoint: Option<String>,
    #[arg(long, default_value = "explainer")]
    pub gen_model: String,
    #[arg(long, default_value_t = 120_000)]
    pub gen_timeout_ms: u64,
    #[arg(long, default_value_t = 1)]
    pub gen_retries: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GeneratorChoice {
    Stub,
    Remote,
}

impl GeneratorArgs {
    pub fn config(&self) -> Result<GeneratorConfig> {
        let endpoint = self.gen_endpoint.as_deref().filter(|ep| !ep.is_empty());
        let choice = self.generator.unwrap_or(match endpoint {
            Some(_) => GeneratorChoice::Remote,
            None => GeneratorChoice::Stub,
        });
        Ok(match choice {
            GeneratorChoice::Stub => GeneratorConfig::Stub,
            GeneratorChoice::Remote => GeneratorConfig::Remote {
                endpoint: endpoint.context("--generator remote needs --gen-endpoint")?.to_string(),
                model: self.gen_model.clone(),
                timeout_ms: self.gen_timeout_ms,
                retries: self.gen_retries,
            },
        })
    }
}

#[derive(Debug, Args, Clone)]
pub struct ListingArgs {
    /// Listing file, or `-` for stdin.
    #[arg(value_name = "LISTING")]
    pub input: PathBuf,
    #[arg(long, default_value = "flatasm")]
    pub format: ListingFormat,
    /// Sample id for FlatAsm input (defaults to the file stem).
    #[arg(long)]
    pub sample_id: Option<String>,
    /// Image address range `0x<lo>:0x<hi>`.
    #[arg(long)]
    pub addr_range: Option<AddrRange>,
}

impl ListingArgs {
    pub fn read(&self) -> Result<(String, Vec<RawFunction>)> {
        let bytes = read_input(&self.input)?;
        let sample_id = self.sample_id.clone().unwrap_or_else(|| {
            self.input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "stdin".into())
        });
        let functions = parse_listing(&bytes, self.format, &sample_id)?;
        let sample_id = match (self.format, functions.first()) {
            (ListingFormat::FunctionJsonl, Some(f)) if self.sample_id.is_none() => f.sample_id.clone(),
            _ => sample_id,
        };
        Ok((sample_id, functions))
    }

    pub fn range(&self) -> Result<AddrRange> {
        match self.addr_range {
            Some(r) => Ok(r),
            None => bail!("--addr-range is required to canonicalize addresses"),
        }
    }
}

pub fn read_input(path: &Path) -> Result<Vec<u8>> {
    if path.as_os_str() == "-" {
        let mut buf = Vec::new();
        std::io::stdin().read_to_end(&mut buf)?;
        Ok(buf)
    } else {
        std::fs::read(path).with_context(|| format!("reading {}", path.display()))
    }
}

pub fn write_json<T: serde::Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}
