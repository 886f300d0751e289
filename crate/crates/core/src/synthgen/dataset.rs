//! On-disk dataset container.
//!
//! ```text
//! <root>/manifest.json   full manifest (config + master seed)
//! <root>/index.jsonl     one record per image
//! <root>/mappers.json    fitted style mappers for every ordered seen pair
//! <root>/images/NNNNNN.bin
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    apply_style, make_subject, render_view, BoxLabel, DomainStyle, GenConfig, Image, StyleId,
    StyleMapper, View,
};
use crate::seed;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    DetectTrain,
    DetectVal,
    DetectTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::DetectTrain, Split::DetectVal, Split::DetectTest];

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    /// Unlabeled subjects; each contributes a CC and an MLO image.
    pub pretrain_unlabeled: usize,
    /// Labeled images (one view of a distinct subject each).
    pub detect_train: usize,
    pub detect_val: usize,
    pub detect_test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Pretrain => self.pretrain_unlabeled,
            Split::DetectTrain => self.detect_train,
            Split::DetectVal => self.detect_val,
            Split::DetectTest => self.detect_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetManifest {
    pub resolution: usize,
    pub seed: u64,
    pub seen_styles: Vec<StyleId>,
    pub unseen_styles: Vec<StyleId>,
    pub seen_counts: SplitCounts,
    pub unseen_counts: SplitCounts,
    /// Pretrain images per style (per view) used to fit each style mapper.
    #[serde(default = "default_mapper_fit_subjects")]
    pub mapper_fit_subjects: usize,
    #[serde(default)]
    pub generation: GenConfig,
    /// Replacements for the built-in style presets.
    #[serde(default)]
    pub styles: Vec<DomainStyle>,
}

fn default_mapper_fit_subjects() -> usize {
    200
}

impl Default for DatasetManifest {
    /// Desk-scale analogue of the seen/unseen vendor layout.
    fn default() -> Self {
        Self {
            resolution: 64,
            seed: 2021,
            seen_styles: vec![StyleId::A, StyleId::B, StyleId::C],
            unseen_styles: vec![StyleId::D, StyleId::E],
            seen_counts: SplitCounts {
                pretrain_unlabeled: 800,
                detect_train: 120,
                detect_val: 20,
                detect_test: 40,
            },
            unseen_counts: SplitCounts {
                pretrain_unlabeled: 0,
                detect_train: 0,
                detect_val: 0,
                detect_test: 40,
            },
            mapper_fit_subjects: default_mapper_fit_subjects(),
            generation: GenConfig::default(),
            styles: Vec::new(),
        }
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seen_styles.len() < 2 {
            return bad(format!("need at least 2 seen styles, got {}", self.seen_styles.len()));
        }
        let mut all: Vec<StyleId> = self.seen_styles.iter().chain(&self.unseen_styles).copied().collect();
        all.sort();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return bad("a style is listed twice across seen/unseen".into());
        }
        let u = &self.unseen_counts;
        if u.pretrain_unlabeled > 0 || u.detect_train > 0 || u.detect_val > 0 {
            return bad(format!(
                "unseen styles must have zero pretrain/detect_train/detect_val images, got {}/{}/{}",
                u.pretrain_unlabeled, u.detect_train, u.detect_val
            ));
        }
        if self.resolution < 32 || !self.resolution.is_multiple_of(16) {
            return bad(format!("resolution {} must be >= 32 and divisible by 16", self.resolution));
        }
        if self.seen_counts.pretrain_unlabeled > 0
            && self.mapper_fit_subjects.min(self.seen_counts.pretrain_unlabeled) * 2 < super::MIN_FIT_IMAGES
        {
            return bad(format!(
                "style mappers need at least {} fit images per style",
                super::MIN_FIT_IMAGES
            ));
        }
        for s in &self.styles {
            s.validate()?;
        }
        self.generation.validate()
    }

    pub fn style(&self, id: StyleId) -> DomainStyle {
        self.styles
            .iter()
            .find(|s| s.style_id == id)
            .cloned()
            .unwrap_or_else(|| DomainStyle::preset(id))
    }

    pub fn counts(&self, id: StyleId) -> &SplitCounts {
        if self.seen_styles.contains(&id) {
            &self.seen_counts
        } else {
            &self.unseen_counts
        }
    }

    pub fn all_styles(&self) -> impl Iterator<Item = StyleId> + '_ {
        self.seen_styles.iter().chain(&self.unseen_styles).copied()
    }

    /// Number of image records the manifest produces for `split` and `style`.
    pub fn expected_images(&self, style: StyleId, split: Split) -> usize {
        let n = self.counts(style).get(split);
        if split == Split::Pretrain {
            2 * n
        } else {
            n
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub id: u64,
    pub subject_id: u64,
    pub view: View,
    pub style: StyleId,
    pub split: Split,
    pub path: String,
    pub boxes: Vec<BoxLabel>,
}

/// A rendered subject: native style, both views, with labels.
#[derive(Clone, Debug)]
pub struct RenderedSubject {
    pub subject_id: u64,
    pub style: StyleId,
    pub cc: Image,
    pub mlo: Image,
    pub cc_boxes: Vec<BoxLabel>,
    pub mlo_boxes: Vec<BoxLabel>,
}

impl RenderedSubject {
    pub fn view(&self, view: View) -> &Image {
        match view {
            View::Cc => &self.cc,
            View::Mlo => &self.mlo,
        }
    }
}

const MAX_RENDER_ATTEMPTS: u64 = 64;

/// Renders the subject at `(style, split, index)`, regenerating (with a new
/// derived seed) when a lesion falls outside a view.
pub fn render_subject(manifest: &DatasetManifest, style: StyleId, split: Split, index: usize) -> Result<RenderedSubject> {
    let style_params = manifest.style(style);
    for attempt in 0..MAX_RENDER_ATTEMPTS {
        let s = seed::derive(manifest.seed, &[style as u64 + 1, split.tag(), index as u64, attempt]);
        let subject = make_subject(s, &manifest.generation);
        let cc = render_view(&subject, View::Cc, manifest.resolution, &manifest.generation);
        let mlo = render_view(&subject, View::Mlo, manifest.resolution, &manifest.generation);
        let ((cc, cc_boxes), (mlo, mlo_boxes)) = match (cc, mlo) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(Error::Render(_)), _) | (_, Err(Error::Render(_))) => continue,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let cc = apply_style(&cc, &style_params, &mut seed::rng(seed::derive(s, &[seed::tag("CC")])));
        let mlo = apply_style(&mlo, &style_params, &mut seed::rng(seed::derive(s, &[seed::tag("MLO")])));
        return Ok(RenderedSubject {
            subject_id: s,
            style,
            cc,
            mlo,
            cc_boxes,
            mlo_boxes,
        });
    }
    Err(Error::Render(format!(
        "no renderable subject for {style}/{split:?}/{index} after {MAX_RENDER_ATTEMPTS} attempts"
    )))
}

/// Summary printed after a build.
#[derive(Clone, Debug, Serialize)]
pub struct BuildSummary {
    pub root: PathBuf,
    pub images: BTreeMap<String, BTreeMap<String, usize>>,
    pub mappers: usize,
    pub total_images: usize,
}

/// Writes the container described by `manifest` into `root` (created if needed).
pub fn build_dataset(manifest: &DatasetManifest, root: &Path) -> Result<BuildSummary> {
    manifest.validate()?;
    fs::create_dir_all(root.join("images"))?;
    fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(manifest)?)?;

    let mut index = BufWriter::new(fs::File::create(root.join("index.jsonl"))?);
    let mut next_id = 0u64;
    let mut summary = BTreeMap::new();
    let mut fit_pool: BTreeMap<StyleId, Vec<Image>> = BTreeMap::new();

    for style in manifest.all_styles() {
        let counts = manifest.counts(style);
        let per_style: &mut BTreeMap<String, usize> = summary.entry(style.to_string()).or_default();
        for split in Split::ALL {
            for i in 0..counts.get(split) {
                let r = render_subject(manifest, style, split, i)?;
                let views: Vec<View> = if split == Split::Pretrain {
                    View::BOTH.to_vec()
                } else {
                    let mut rng = seed::rng(seed::derive(r.subject_id, &[seed::tag("view")]));
                    vec![if rng.random::<bool>() { View::Cc } else { View::Mlo }]
                };
                for view in views {
                    let (img, boxes) = match view {
                        View::Cc => (&r.cc, &r.cc_boxes),
                        View::Mlo => (&r.mlo, &r.mlo_boxes),
                    };
                    let rel = format!("images/{next_id:06}.bin");
                    img.save(&root.join(&rel))?;
                    let record = IndexRecord {
                        id: next_id,
                        subject_id: r.subject_id,
                        view,
                        style,
                        split,
                        path: rel,
                        boxes: if split == Split::Pretrain { Vec::new() } else { boxes.clone() },
                    };
                    serde_json::to_writer(&mut index, &record)?;
                    index.write_all(b"\n")?;
                    next_id += 1;
                    *per_style.entry(format!("{split:?}")).or_default() += 1;
                    if split == Split::Pretrain && i < manifest.mapper_fit_subjects {
                        fit_pool.entry(style).or_default().push(img.clone());
                    }
                }
            }
        }
    }
    index.flush()?;

    let mut mappers = Vec::new();
    for &a in &manifest.seen_styles {
        for &b in &manifest.seen_styles {
            if a != b {
                if let (Some(src), Some(dst)) = (fit_pool.get(&a), fit_pool.get(&b)) {
                    mappers.push(StyleMapper::fit(a, src, b, dst)?);
                }
            }
        }
    }
    fs::write(root.join("mappers.json"), serde_json::to_vec_pretty(&mappers)?)?;

    Ok(BuildSummary {
        root: root.to_path_buf(),
        images: summary,
        mappers: mappers.len(),
        total_images: next_id as usize,
    })
}

/// Read access to a built container.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    pub manifest: DatasetManifest,
    pub records: Vec<IndexRecord>,
    pub mappers: Vec<StyleMapper>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join("manifest.json");
        if !manifest_path.exists() {
            return Err(Error::MissingArtifact(manifest_path));
        }
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        let mut records = Vec::new();
        for line in BufReader::new(fs::File::open(root.join("index.jsonl"))?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        let mappers = serde_json::from_slice(&fs::read(root.join("mappers.json"))?)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            records,
            mappers,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn read_image(&self, record: &IndexRecord) -> Result<Image> {
        Image::load(&self.root.join(&record.path))
    }

    pub fn records_for<'a>(&'a self, style: StyleId, split: Split) -> impl Iterator<Item = &'a IndexRecord> + 'a {
        self.records.iter().filter(move |r| r.style == style && r.split == split)
    }

    /// Mapper `source -> target`; identity when they coincide.
    pub fn mapper(&self, source: StyleId, target: StyleId) -> Result<StyleMapper> {
        if source == target {
            return Ok(StyleMapper::identity(source));
        }
        self.mappers
            .iter()
            .find(|m| m.source_id == source && m.target_id == target)
            .cloned()
            .ok_or_else(|| Error::Pairing(format!("no style mapper {source} -> {target}")))
    }

    /// Loads labeled images of one split and style.
    pub fn labeled(&self, style: StyleId, split: Split) -> Result<Vec<LabeledImage>> {
        self.records_for(style, split)
            .map(|r| {
                Ok(LabeledImage {
                    id: r.id,
                    style,
                    image: self.read_image(r)?,
                    boxes: r.boxes.clone(),
                })
            })
            .collect()
    }

    /// Pretraining subjects (both views) of the seen styles, sorted by subject id.
    pub fn pretrain_subjects(&self) -> Result<Vec<RenderedSubject>> {
        let mut by_subject: BTreeMap<u64, (StyleId, Option<Image>, Option<Image>)> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.split == Split::Pretrain) {
            let e = by_subject.entry(r.subject_id).or_insert((r.style, None, None));
            let img = self.read_image(r)?;
            match r.view {
                View::Cc => e.1 = Some(img),
                View::Mlo => e.2 = Some(img),
            }
        }
        by_subject
            .into_iter()
            .map(|(id, (style, cc, mlo))| match (cc, mlo) {
                (Some(cc), Some(mlo)) => Ok(RenderedSubject {
                    subject_id: id,
                    style,
                    cc,
                    mlo,
                    cc_boxes: Vec::new(),
                    mlo_boxes: Vec::new(),
                }),
                _ => Err(Error::Pairing(format!("subject {id} is missing a view"))),
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub id: u64,
    pub style: StyleId,
    pub image: Image,
    pub boxes: Vec<BoxLabel>,
}
