//! Dataset manifest: one tab-separated record per subject with a fixed
//! column order. Lines starting with `#` carry the format tag and
//! provenance. File paths are relative to the manifest's directory.
//!
//! ```text
//! #sketch-refine-manifest v1
//! #seed 2019
//! #config_hash 3f2a…
//! id  group    mtr          fa          rd          ad          dvr          lesion          nawm          demyelination
//! P01 patient  P01/mtr.mvol P01/fa.mvol P01/rd.mvol P01/ad.mvol P01/dvr.mvol P01/lesion.mvol P01/nawm.mvol P01/demyelination.mvol
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Provenance;
use crate::error::{Error, Result};
use crate::phantom::PhantomSubject;
use crate::volume::{load_volume, partition_masks, MultimodalStack, Volume3D};

pub const MANIFEST_TAG: &str = "#sketch-refine-manifest v1";

pub const COLUMNS: [&str; 10] = [
    "id",
    "group",
    "mtr",
    "fa",
    "rd",
    "ad",
    "dvr",
    "lesion",
    "nawm",
    "demyelination",
];

/// Files of one subject, in column order after `id` and `group`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub is_patient: bool,
    pub channels: [PathBuf; 4],
    pub dvr: PathBuf,
    pub lesion: PathBuf,
    pub nawm: PathBuf,
    pub demyelination: PathBuf,
}

impl ManifestEntry {
    /// Conventional layout: one directory per subject.
    pub fn standard(id: &str, is_patient: bool) -> Self {
        let f = |name: &str| PathBuf::from(id).join(format!("{name}.mvol"));
        Self {
            id: id.to_string(),
            is_patient,
            channels: [f("mtr"), f("fa"), f("rd"), f("ad")],
            dvr: f("dvr"),
            lesion: f("lesion"),
            nawm: f("nawm"),
            demyelination: f("demyelination"),
        }
    }

    fn files(&self) -> impl Iterator<Item = &PathBuf> {
        self.channels
            .iter()
            .chain([&self.dvr, &self.lesion, &self.nawm, &self.demyelination])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub provenance: Option<Provenance>,
    pub entries: Vec<ManifestEntry>,
    /// Directory the relative paths resolve against.
    pub base_dir: PathBuf,
}

fn err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Manifest(format!("line {line}: {msg}"))
}

impl DatasetManifest {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == MANIFEST_TAG => {}
            _ => return Err(err(1, format!("expected `{MANIFEST_TAG}`"))),
        }
        let mut seed = None;
        let mut hash = None;
        let mut header_seen = false;
        let mut entries = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                match meta.split_once(' ') {
                    Some(("seed", v)) => {
                        seed = Some(v.parse::<u64>().map_err(|_| err(n, "bad seed"))?)
                    }
                    Some(("config_hash", v)) => hash = Some(v.to_string()),
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !header_seen {
                if fields != COLUMNS {
                    return Err(err(
                        n,
                        format!("column header must be `{}`", COLUMNS.join("\\t")),
                    ));
                }
                header_seen = true;
                continue;
            }
            if fields.len() != COLUMNS.len() {
                return Err(err(
                    n,
                    format!("expected {} fields, found {}", COLUMNS.len(), fields.len()),
                ));
            }
            if fields.iter().any(|f| f.is_empty()) {
                return Err(err(n, "empty field"));
            }
            let is_patient = match fields[1] {
                "patient" => true,
                "control" => false,
                g => {
                    return Err(err(
                        n,
                        format!("group must be `patient` or `control`, got `{g}`"),
                    ))
                }
            };
            let p = |i: usize| PathBuf::from(fields[i]);
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                is_patient,
                channels: [p(2), p(3), p(4), p(5)],
                dvr: p(6),
                lesion: p(7),
                nawm: p(8),
                demyelination: p(9),
            });
        }
        if !header_seen {
            return Err(Error::Manifest("missing column header".into()));
        }
        let provenance = match (seed, hash) {
            (Some(seed), Some(config_hash)) => Some(Provenance { config_hash, seed }),
            _ => None,
        };
        Ok(Self {
            provenance,
            entries,
            base_dir: base_dir.into(),
        })
    }

    /// Reads and validates a manifest file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::parse(
            &text,
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
        )?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_TAG}\n");
        if let Some(p) = &self.provenance {
            out.push_str(&format!(
                "#seed {}\n#config_hash {}\n",
                p.seed, p.config_hash
            ));
        }
        out.push_str(&COLUMNS.join("\t"));
        out.push('\n');
        for e in &self.entries {
            let mut fields = vec![
                e.id.clone(),
                if e.is_patient { "patient" } else { "control" }.to_string(),
            ];
            fields.extend(e.files().map(|f| f.to_string_lossy().into_owned()));
            out.push_str(&fields.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn path_of(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// Valid iff the manifest is nonempty, ids are unique, every file
    /// exists and parses, each subject's volumes share dims and the lesion
    /// and NAWM masks are disjoint.
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Manifest("no subjects listed".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate subject id {}", e.id)));
            }
        }
        for e in &self.entries {
            self.load_entry(e)?;
        }
        Ok(())
    }

    fn load_entry(&self, e: &ManifestEntry) -> Result<PhantomSubject> {
        let load = |p: &PathBuf| -> Result<Volume3D> {
            load_volume(self.path_of(p)).map_err(|err| match err {
                Error::MissingFile(path) => {
                    Error::Manifest(format!("subject {}: missing file {}", e.id, path.display()))
                }
                other => other,
            })
        };
        let channels = e.channels.iter().map(load).collect::<Result<Vec<_>>>()?;
        let stack = MultimodalStack::new(channels)?;
        let dvr = load(&e.dvr)?;
        let lesion = load(&e.lesion)?;
        let nawm = load(&e.nawm)?;
        let demyelination = load(&e.demyelination)?;
        for (name, v) in [
            ("dvr", &dvr),
            ("lesion", &lesion),
            ("nawm", &nawm),
            ("demyelination", &demyelination),
        ] {
            if v.dims() != stack.dims() {
                return Err(Error::Dims(format!(
                    "subject {}: {name} has dims {:?}, channels {:?}",
                    e.id,
                    v.dims(),
                    stack.dims()
                )));
            }
        }
        let masks = partition_masks(&lesion, &nawm)?;
        Ok(PhantomSubject {
            id: e.id.clone(),
            stack,
            dvr_noise_free: dvr.clone(),
            dvr,
            masks,
            demyelination_truth: demyelination,
            is_patient: e.is_patient,
            lesion_factors: Vec::new(),
        })
    }

    /// Loads every subject. Quantities not stored in the manifest (the
    /// noise-free DVR, lesion factors) are filled with the observed DVR and
    /// an empty list.
    pub fn load_subjects(&self) -> Result<Vec<PhantomSubject>> {
        self.entries.iter().map(|e| self.load_entry(e)).collect()
    }
}
