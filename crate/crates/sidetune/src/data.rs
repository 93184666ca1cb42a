//! Corpus ingestion and split protocol for paired image/text datasets.
//!
//! Two layouts are supported: folder-per-class (`<root>/<class>/<stem>.tif`
//! with texts at `<text_root>/<class>/<stem>.txt`) and index files
//! (`train.txt`/`val.txt`/`test.txt`, one `relative/path label` line per
//! sample). Class indices come from the lexicographically sorted class list
//! so label assignment is stable across runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_EXTENSIONS: [&str; 5] = ["tif", "tiff", "png", "jpg", "jpeg"];

/// One page: its image path, pre-extracted OCR text (empty when the text
/// file was missing), and the class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentSample {
    pub image_path: PathBuf,
    pub text: String,
    /// True when no stem-matched text file existed.
    pub text_missing: bool,
    pub label: usize,
}

/// A loaded corpus plus its class list and pairing diagnostics.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub samples: Vec<DocumentSample>,
    pub class_names: Vec<String>,
    /// Count of samples that fell back to empty text.
    pub missing_text: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorpusLayout {
    #[serde(rename = "folder-per-class")]
    FolderPerClass,
    #[serde(rename = "index-file")]
    IndexFile,
}

impl std::str::FromStr for CorpusLayout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "folder-per-class" => Ok(CorpusLayout::FolderPerClass),
            "index-file" => Ok(CorpusLayout::IndexFile),
            other => Err(Error::InvalidConfig(format!("unknown layout {other:?}"))),
        }
    }
}

/// Train/val/test membership with the seed that produced it.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<DocumentSample>,
    pub val: Vec<DocumentSample>,
    pub test: Vec<DocumentSample>,
    pub seed: u64,
    pub class_names: Vec<String>,
}

impl DatasetSplit {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Loads a corpus, pairing every image with its text by file stem. Missing
/// texts become empty strings and are counted, not dropped.
pub fn load_corpus(image_root: &Path, text_root: &Path, layout: CorpusLayout) -> Result<Corpus> {
    if !image_root.is_dir() {
        return Err(Error::MissingRoot(image_root.to_path_buf()));
    }
    if !text_root.is_dir() {
        return Err(Error::MissingRoot(text_root.to_path_buf()));
    }
    match layout {
        CorpusLayout::FolderPerClass => load_folder_per_class(image_root, text_root),
        CorpusLayout::IndexFile => load_index_files(image_root, text_root),
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn read_text_if_present(path: &Path) -> Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn load_folder_per_class(image_root: &Path, text_root: &Path) -> Result<Corpus> {
    let mut class_dirs: Vec<String> = fs::read_dir(image_root)
        .map_err(|e| Error::io(image_root, e))?
        .filter_map(|entry| {
            let entry = entry.ok()?;
            let path = entry.path();
            path.is_dir()
                .then(|| path.file_name().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::LayoutMismatch(format!(
            "{} has no class subdirectories",
            image_root.display()
        )));
    }
    class_dirs.sort();

    let mut samples = Vec::new();
    let mut missing_text = 0usize;
    for (label, class) in class_dirs.iter().enumerate() {
        let dir = image_root.join(class);
        let mut stems: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        stems.sort();
        for image_path in stems {
            let stem = image_path.file_stem().unwrap().to_string_lossy();
            let text_path = text_root.join(class).join(format!("{stem}.txt"));
            let (text, text_missing) = match read_text_if_present(&text_path)? {
                Some(t) => (t, false),
                None => {
                    missing_text += 1;
                    (String::new(), true)
                }
            };
            samples.push(DocumentSample {
                image_path,
                text,
                text_missing,
                label,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyCorpus(image_root.to_path_buf()));
    }
    Ok(Corpus {
        samples,
        class_names: class_dirs,
        missing_text,
    })
}

fn find_index(image_root: &Path, name: &str) -> Option<PathBuf> {
    [image_root.join(name), image_root.join("labels").join(name)]
        .into_iter()
        .find(|c| c.is_file())
}

fn parse_index_file(
    index: &Path,
    image_root: &Path,
    text_root: &Path,
    missing_text: &mut usize,
    max_label: &mut usize,
) -> Result<Vec<DocumentSample>> {
    let body = fs::read_to_string(index).map_err(|e| Error::io(index, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (rel, label) = line.rsplit_once(' ').ok_or_else(|| {
            Error::LayoutMismatch(format!(
                "{}:{}: expected 'path label'",
                index.display(),
                lineno + 1
            ))
        })?;
        let label: usize = label.parse().map_err(|_| {
            Error::LayoutMismatch(format!(
                "{}:{}: label {label:?} is not an integer",
                index.display(),
                lineno + 1
            ))
        })?;
        *max_label = (*max_label).max(label);
        let image_path = image_root.join(rel);
        let text_path = text_root.join(Path::new(rel).with_extension("txt"));
        let (text, text_missing) = match read_text_if_present(&text_path)? {
            Some(t) => (t, false),
            None => {
                *missing_text += 1;
                (String::new(), true)
            }
        };
        samples.push(DocumentSample {
            image_path,
            text,
            text_missing,
            label,
        });
    }
    Ok(samples)
}

/// Finds `train.txt`/`val.txt`/`test.txt` under the root or its `labels/`
/// subdirectory and concatenates them.
fn load_index_files(image_root: &Path, text_root: &Path) -> Result<Corpus> {
    let indexes: Vec<PathBuf> = ["train.txt", "val.txt", "test.txt"]
        .iter()
        .filter_map(|name| find_index(image_root, name))
        .collect();
    if indexes.is_empty() {
        return Err(Error::LayoutMismatch(format!(
            "no train.txt/val.txt/test.txt under {}",
            image_root.display()
        )));
    }
    let mut samples = Vec::new();
    let mut missing_text = 0usize;
    let mut max_label = 0usize;
    for index in &indexes {
        samples.extend(parse_index_file(
            index,
            image_root,
            text_root,
            &mut missing_text,
            &mut max_label,
        )?);
    }
    if samples.is_empty() {
        return Err(Error::EmptyCorpus(image_root.to_path_buf()));
    }
    let class_names = (0..=max_label).map(|i| i.to_string()).collect();
    Ok(Corpus {
        samples,
        class_names,
        missing_text,
    })
}

/// Loads the dataset's own fixed train/val/test membership from index
/// files. `train.txt` is required; the others may be absent.
pub fn load_index_split(image_root: &Path, text_root: &Path) -> Result<DatasetSplit> {
    if !image_root.is_dir() {
        return Err(Error::MissingRoot(image_root.to_path_buf()));
    }
    if !text_root.is_dir() {
        return Err(Error::MissingRoot(text_root.to_path_buf()));
    }
    let train_index = find_index(image_root, "train.txt").ok_or_else(|| {
        Error::LayoutMismatch(format!("no train.txt under {}", image_root.display()))
    })?;
    let mut missing_text = 0usize;
    let mut max_label = 0usize;
    let train = parse_index_file(
        &train_index,
        image_root,
        text_root,
        &mut missing_text,
        &mut max_label,
    )?;
    let mut part = |name: &str| -> Result<Vec<DocumentSample>> {
        match find_index(image_root, name) {
            Some(index) => parse_index_file(
                &index,
                image_root,
                text_root,
                &mut missing_text,
                &mut max_label,
            ),
            None => Ok(Vec::new()),
        }
    };
    let val = part("val.txt")?;
    let test = part("test.txt")?;
    if train.is_empty() {
        return Err(Error::EmptyCorpus(image_root.to_path_buf()));
    }
    let class_names = (0..=max_label).map(|i| i.to_string()).collect();
    Ok(DatasetSplit {
        train,
        val,
        test,
        seed: 0,
        class_names,
    })
}

/// Deterministic random split: Fisher-Yates shuffle under a seeded stream
/// cipher RNG, then slicing by the declared sizes. The sizes must cover the
/// corpus exactly.
pub fn split_random(
    samples: &[DocumentSample],
    class_names: Vec<String>,
    seed: u64,
    sizes: (usize, usize, usize),
) -> Result<DatasetSplit> {
    let (n_train, n_val, n_test) = sizes;
    let expected = n_train + n_val + n_test;
    if samples.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: samples.len(),
        });
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let pick = |range: std::ops::Range<usize>| {
        order[range]
            .iter()
            .map(|&i| samples[i].clone())
            .collect::<Vec<_>>()
    };
    Ok(DatasetSplit {
        train: pick(0..n_train),
        val: pick(n_train..n_train + n_val),
        test: pick(n_train + n_val..expected),
        seed,
        class_names,
    })
}

/// Per-class sample counts, for balance diagnostics.
pub fn class_histogram(samples: &[DocumentSample]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for s in samples {
        *hist.entry(s.label).or_insert(0) += 1;
    }
    hist
}

/// Stratified variant of [`split_random`]: each class contributes to the
/// train and val parts in proportion to its frequency (largest-remainder
/// rounding), the rest going to test. Off by default; the plain random
/// split is the reference protocol.
pub fn split_stratified(
    samples: &[DocumentSample],
    class_names: Vec<String>,
    seed: u64,
    sizes: (usize, usize, usize),
) -> Result<DatasetSplit> {
    let (n_train, n_val, n_test) = sizes;
    let expected = n_train + n_val + n_test;
    if samples.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: samples.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Class membership in deterministic label order, shuffled within class.
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
    }
    let total = samples.len() as f64;
    // Largest-remainder quotas per class for train and val.
    let quota = |target: usize| -> BTreeMap<usize, usize> {
        let mut floors: BTreeMap<usize, usize> = BTreeMap::new();
        let mut remainders: Vec<(f64, usize)> = Vec::new();
        let mut allocated = 0usize;
        for (&label, members) in &by_class {
            let exact = target as f64 * members.len() as f64 / total;
            let floor = exact.floor() as usize;
            floors.insert(label, floor);
            allocated += floor;
            remainders.push((exact - floor as f64, label));
        }
        remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for (_, label) in remainders.into_iter().take(target.saturating_sub(allocated)) {
            *floors.get_mut(&label).unwrap() += 1;
        }
        floors
    };
    let train_quota = quota(n_train);
    let val_quota = quota(n_val);
    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n_val);
    let mut test = Vec::with_capacity(n_test);
    for (&label, members) in &by_class {
        let t = train_quota[&label].min(members.len());
        let v = val_quota[&label].min(members.len() - t);
        for &i in &members[..t] {
            train.push(samples[i].clone());
        }
        for &i in &members[t..t + v] {
            val.push(samples[i].clone());
        }
        for &i in &members[t + v..] {
            test.push(samples[i].clone());
        }
    }
    // Quota rounding can leave the first two parts short by a few samples;
    // rebalance from the test pool deterministically.
    while train.len() < n_train {
        train.push(test.pop().ok_or(Error::SizeMismatch {
            expected,
            actual: samples.len(),
        })?);
    }
    while val.len() < n_val {
        val.push(test.pop().ok_or(Error::SizeMismatch {
            expected,
            actual: samples.len(),
        })?);
    }
    Ok(DatasetSplit {
        train,
        val,
        test,
        seed,
        class_names,
    })
}
