//! Checkpoint archive: a single file holding the canonical configuration
//! text, the training RNG state and every parameter block.
//!
//! Layout: the line `SRCKPT1`, a line with the byte length of the header,
//! a TOML header (stage, RNG state, network configs, run config text and a
//! manifest of block names and shapes), then the raw little-endian `f64`
//! values of all blocks in manifest order.

use std::fs;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{
    BaselineConfig, Discriminator, DiscriminatorConfig, ForwardSignature, Generator,
    GeneratorConfig, ParamBlock, ParamGraph, VoxelMlp,
};

pub const CHECKPOINT_MAGIC: &str = "SRCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Sketcher = 0,
    Refiner = 1,
    Baseline = 2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Sketcher => "sketcher",
            Stage::Refiner => "refiner",
            Stage::Baseline => "baseline",
        }
    }
}

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Parameters and provenance of one trained stage. For GAN stages the
/// graphs are `[generator, discriminator]`; for the baseline `[mlp]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Canonical text of the run configuration.
    pub config_text: String,
    pub epochs_run: usize,
    pub generator: Option<GeneratorConfig>,
    pub discriminator: Option<DiscriminatorConfig>,
    pub baseline: Option<BaselineConfig>,
    pub rng: RngState,
    pub graphs: Vec<ParamGraph>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stage: Stage,
    epochs_run: usize,
    rng_seed: String,
    rng_stream: String,
    rng_word_pos: String,
    config: String,
    generator: Option<GeneratorConfig>,
    discriminator: Option<DiscriminatorConfig>,
    baseline: Option<BaselineConfig>,
    graphs: Vec<GraphHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphHeader {
    in_channels: usize,
    out_channels: usize,
    per_patch: bool,
    blocks: Vec<BlockHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockHeader {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn generator(&self) -> Result<Generator> {
        let cfg = self
            .generator
            .as_ref()
            .ok_or_else(|| bad(format!("{} checkpoint has no generator", self.stage.name())))?;
        Generator::new(cfg.clone(), 0)?.with_graph(self.graph(0)?.clone())
    }

    pub fn discriminator(&self) -> Result<Discriminator> {
        let cfg = self.discriminator.as_ref().ok_or_else(|| {
            bad(format!(
                "{} checkpoint has no discriminator",
                self.stage.name()
            ))
        })?;
        Discriminator::new(cfg.clone(), 0)?.with_graph(self.graph(1)?.clone())
    }

    pub fn baseline_net(&self) -> Result<VoxelMlp> {
        let cfg = self.baseline.as_ref().ok_or_else(|| {
            bad(format!(
                "{} checkpoint has no baseline network",
                self.stage.name()
            ))
        })?;
        VoxelMlp::new(cfg.clone(), 0)?.with_graph(self.graph(0)?.clone())
    }

    fn graph(&self, i: usize) -> Result<&ParamGraph> {
        self.graphs
            .get(i)
            .ok_or_else(|| bad(format!("missing parameter graph {i}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            stage: self.stage,
            epochs_run: self.epochs_run,
            rng_seed: hex::encode(self.rng.seed),
            rng_stream: self.rng.stream.to_string(),
            rng_word_pos: self.rng.word_pos.to_string(),
            config: self.config_text.clone(),
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            baseline: self.baseline.clone(),
            graphs: self
                .graphs
                .iter()
                .map(|g| GraphHeader {
                    in_channels: g.signature.in_channels,
                    out_channels: g.signature.out_channels,
                    per_patch: g.signature.per_patch,
                    blocks: g
                        .blocks
                        .iter()
                        .map(|b| BlockHeader {
                            name: b.name.clone(),
                            shape: b.shape.clone(),
                            trainable: b.trainable,
                        })
                        .collect(),
                })
                .collect(),
        };
        let text =
            toml::to_string(&header).map_err(|e| bad(format!("cannot encode header: {e}")))?;
        let mut out = format!("{CHECKPOINT_MAGIC}\n{}\n{text}", text.len()).into_bytes();
        for g in &self.graphs {
            for b in &g.blocks {
                for v in &b.values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rest = bytes;
        let mut line = || -> Result<&str> {
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated preamble"))?;
            let l = std::str::from_utf8(&rest[..end]).map_err(|_| bad("preamble is not UTF-8"))?;
            rest = &rest[end + 1..];
            Ok(l)
        };
        if line()? != CHECKPOINT_MAGIC {
            return Err(bad(format!("missing {CHECKPOINT_MAGIC} magic")));
        }
        let len: usize = line()?.parse().map_err(|_| bad("bad header length"))?;
        if rest.len() < len {
            return Err(bad("truncated header"));
        }
        let text = std::str::from_utf8(&rest[..len]).map_err(|_| bad("header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| bad(format!("bad header: {e}")))?;
        let mut data = rest[len..].chunks_exact(8);
        if !data.remainder().is_empty() {
            return Err(bad("parameter data is not a whole number of f64 values"));
        }
        let mut graphs = Vec::with_capacity(header.graphs.len());
        for gh in header.graphs {
            let mut g = ParamGraph::new(ForwardSignature {
                in_channels: gh.in_channels,
                out_channels: gh.out_channels,
                per_patch: gh.per_patch,
            });
            for bh in gh.blocks {
                let n: usize = bh.shape.iter().product();
                let values = (0..n)
                    .map(|_| {
                        data.next()
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .ok_or_else(|| bad(format!("block {} is truncated", bh.name)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                g.blocks.push(ParamBlock {
                    name: bh.name,
                    shape: bh.shape,
                    values,
                    trainable: bh.trainable,
                });
            }
            graphs.push(g);
        }
        if data.next().is_some() {
            return Err(bad("trailing parameter data"));
        }
        let seed: [u8; 32] = hex::decode(&header.rng_seed)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| bad("rng seed must be 32 hex bytes"))?;
        Ok(Self {
            stage: header.stage,
            config_text: header.config,
            epochs_run: header.epochs_run,
            generator: header.generator,
            discriminator: header.discriminator,
            baseline: header.baseline,
            rng: RngState {
                seed,
                stream: header
                    .rng_stream
                    .parse()
                    .map_err(|_| bad("bad rng stream"))?,
                word_pos: header
                    .rng_word_pos
                    .parse()
                    .map_err(|_| bad("bad rng word position"))?,
            },
            graphs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::build_generator;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let cfg = GeneratorConfig {
            base_filters: 2,
            depth: 2,
            ..GeneratorConfig::default()
        };
        let g = build_generator(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(4);
        rng.next_u64();
        let d = Discriminator::new(DiscriminatorConfig::default(), 1).unwrap();
        Checkpoint {
            stage: Stage::Sketcher,
            config_text: "[train]\nepochs = 3\n".into(),
            epochs_run: 3,
            generator: Some(cfg),
            discriminator: Some(d.config().clone()),
            baseline: None,
            rng: RngState::capture(&rng),
            graphs: vec![g.graph().clone(), d.graph().clone()],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut c = sample();
        c.graphs[0].blocks[0].values[0] = 0.1 + 0.2;
        c.graphs[0].blocks[0].values[1] = -0.0;
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for (a, b) in c.graphs.iter().zip(&back.graphs) {
            for (x, y) in a.blocks.iter().zip(&b.blocks) {
                assert!(x
                    .values
                    .iter()
                    .zip(&y.values)
                    .all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
        assert_eq!(back, c);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(2);
        for _ in 0..7 {
            rng.next_u32();
        }
        let mut restored = RngState::capture(&rng).restore();
        assert_eq!(restored.next_u64(), rng.next_u64());
    }

    #[test]
    fn networks_rebuild_from_archive() {
        let c = Checkpoint::from_bytes(&sample().to_bytes().unwrap()).unwrap();
        assert_eq!(c.generator().unwrap().graph(), &c.graphs[0]);
        assert_eq!(c.discriminator().unwrap().graph(), &c.graphs[1]);
        assert_eq!(c.baseline_net().unwrap_err().kind(), "checkpoint");
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(b"NOPE\n1\nx").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 8]);
        assert!(Checkpoint::from_bytes(&longer).is_err());
    }
}
