//! Contrastive batch construction for the four pretraining schemes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{augment, AugParams};
use crate::nn::{Scalar, Tensor};
use crate::synthgen::{transfer_style, Image, RenderedSubject, StyleId, StyleMapper, View};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Two augmentations of one image.
    SimClr,
    /// Two style versions of one image.
    Mscl,
    /// CC and MLO views of one breast.
    Mvcl,
    /// Independently styled CC and MLO views of one breast.
    Msvcl,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::SimClr, Scheme::Mscl, Scheme::Mvcl, Scheme::Msvcl];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::SimClr => "simclr",
            Scheme::Mscl => "mscl",
            Scheme::Mvcl => "mvcl",
            Scheme::Msvcl => "msvcl",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?}")))
    }
}

/// How MSVCL positives are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsvclMode {
    /// One CC and one MLO sample of the breast, each in an independently
    /// drawn seen style.
    #[default]
    CrossView,
    /// Each pair is, with equal probability, an MSCL-style pair (same view,
    /// two distinct styles) or an MVCL pair (both views, native style).
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSource {
    pub subject_id: u64,
    pub view: View,
    pub style: StyleId,
}

#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub samples: Vec<Image>,
    /// `positive_map[i]` is the index of the positive partner of sample `i`.
    pub positive_map: Vec<usize>,
    pub sources: Vec<SampleSource>,
    pub n_sources: usize,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks the involution and same-source invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.samples.len();
        if self.positive_map.len() != n || self.sources.len() != n || n != 2 * self.n_sources {
            return Err(Error::Pairing("batch arrays disagree in length".into()));
        }
        for (i, &j) in self.positive_map.iter().enumerate() {
            if j >= n || j == i || self.positive_map[j] != i {
                return Err(Error::Pairing(format!("positive_map is not an involution at {i}")));
            }
            if self.sources[i].subject_id != self.sources[j].subject_id {
                return Err(Error::Pairing(format!("pair ({i}, {j}) mixes subjects")));
            }
        }
        Ok(())
    }

    /// Stacks the samples as an NHWC tensor `[2N, H, W, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        images_to_tensor(&self.samples)
    }
}

pub fn images_to_tensor<T: Scalar>(images: &[Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("no images to stack".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::Shape("images differ in size".into()));
        }
        data.extend(img.pixels().iter().map(|&p| T::from_f64(p as f64)));
    }
    Tensor::from_vec(&[images.len(), h, w, 1], data)
}

/// Style mappers between every ordered pair of seen styles.
#[derive(Clone, Debug, Default)]
pub struct MapperBank {
    mappers: BTreeMap<(StyleId, StyleId), StyleMapper>,
}

impl MapperBank {
    pub fn new(mappers: impl IntoIterator<Item = StyleMapper>) -> Self {
        Self {
            mappers: mappers.into_iter().map(|m| ((m.source_id, m.target_id), m)).collect(),
        }
    }

    pub fn transfer(&self, image: &Image, from: StyleId, to: StyleId) -> Result<Image> {
        if from == to {
            return Ok(image.clone());
        }
        let m = self
            .mappers
            .get(&(from, to))
            .ok_or_else(|| Error::Pairing(format!("no style mapper {from} -> {to}")))?;
        Ok(transfer_style(image, m))
    }
}

/// `N * C(M, 2)`: unordered same-source pairs in a pool of `M` style
/// versions of each of `N` images.
pub fn count_possible_positives(n_images: u64, n_styles: u64) -> Result<u64> {
    if n_styles < 2 {
        return Err(Error::Config(format!("need at least 2 styles, got {n_styles}")));
    }
    Ok(n_images * n_styles * (n_styles - 1) / 2)
}

/// Everything `build_batch` needs besides the sources.
pub struct PairingContext<'a> {
    pub seen_styles: &'a [StyleId],
    pub mappers: &'a MapperBank,
    pub aug: &'a AugParams,
    pub msvcl_mode: MsvclMode,
}

fn random_view<R: Rng>(rng: &mut R) -> View {
    if rng.random::<bool>() {
        View::Cc
    } else {
        View::Mlo
    }
}

/// Builds a batch of `2 * sources.len()` samples with pairs at `(2k, 2k + 1)`.
pub fn build_batch<R: Rng>(
    scheme: Scheme,
    sources: &[&RenderedSubject],
    ctx: &PairingContext<'_>,
    rng: &mut R,
) -> Result<ContrastiveBatch> {
    if sources.is_empty() {
        return Err(Error::Pairing("no sources".into()));
    }
    let mut seen_ids = BTreeSet::new();
    for s in sources {
        if !ctx.seen_styles.contains(&s.style) {
            return Err(Error::Pairing(format!(
                "subject {} has unseen style {}",
                s.subject_id, s.style
            )));
        }
        if !seen_ids.insert(s.subject_id) {
            return Err(Error::Pairing(format!("subject {} appears twice in one batch", s.subject_id)));
        }
    }
    let m = ctx.seen_styles.len();
    if matches!(scheme, Scheme::Mscl | Scheme::Msvcl) && m < 2 {
        return Err(Error::Pairing(format!("{scheme} needs at least 2 seen styles")));
    }

    let mut samples = Vec::with_capacity(2 * sources.len());
    let mut provenance = Vec::with_capacity(2 * sources.len());
    for src in sources {
        let pair: [(View, StyleId); 2] = match scheme {
            Scheme::SimClr => {
                let v = random_view(rng);
                [(v, src.style), (v, src.style)]
            }
            Scheme::Mscl => {
                let v = random_view(rng);
                let (a, b) = distinct_style_pair(ctx.seen_styles, rng);
                [(v, a), (v, b)]
            }
            Scheme::Mvcl => [(View::Cc, src.style), (View::Mlo, src.style)],
            Scheme::Msvcl => match ctx.msvcl_mode {
                MsvclMode::CrossView => {
                    let sa = ctx.seen_styles[rng.random_range(0..m)];
                    let sb = ctx.seen_styles[rng.random_range(0..m)];
                    [(View::Cc, sa), (View::Mlo, sb)]
                }
                MsvclMode::Mixed => {
                    if rng.random::<bool>() {
                        let v = random_view(rng);
                        let (a, b) = distinct_style_pair(ctx.seen_styles, rng);
                        [(v, a), (v, b)]
                    } else {
                        [(View::Cc, src.style), (View::Mlo, src.style)]
                    }
                }
            },
        };
        for (view, style) in pair {
            let styled = ctx.mappers.transfer(src.view(view), src.style, style)?;
            samples.push(augment(&styled, ctx.aug, rng));
            provenance.push(SampleSource {
                subject_id: src.subject_id,
                view,
                style,
            });
        }
    }
    let positive_map = (0..samples.len()).map(|i| i ^ 1).collect();
    let batch = ContrastiveBatch {
        samples,
        positive_map,
        sources: provenance,
        n_sources: sources.len(),
    };
    batch.validate()?;
    Ok(batch)
}

/// Uniform draw over the `C(M, 2)` unordered pairs of distinct styles.
fn distinct_style_pair<R: Rng>(styles: &[StyleId], rng: &mut R) -> (StyleId, StyleId) {
    let m = styles.len();
    let mut k = rng.random_range(0..m * (m - 1) / 2);
    for a in 0..m {
        let row = m - 1 - a;
        if k < row {
            return (styles[a], styles[a + 1 + k]);
        }
        k -= row;
    }
    unreachable!("pair index within C(M, 2)")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn subject(id: u64, style: StyleId) -> RenderedSubject {
        let img = |v: f32| Image::new(16, 16, (0..256).map(|i| (i as f32 / 255.0) * v).collect()).unwrap();
        RenderedSubject {
            subject_id: id,
            style,
            cc: img(0.5),
            mlo: img(0.9),
            cc_boxes: vec![],
            mlo_boxes: vec![],
        }
    }

    fn bank() -> MapperBank {
        let styles = [StyleId::A, StyleId::B, StyleId::C];
        let mut v = Vec::new();
        for a in styles {
            for b in styles {
                if a != b {
                    v.push(StyleMapper {
                        target_id: b,
                        source_id: a,
                        ..StyleMapper::identity(a)
                    });
                }
            }
        }
        MapperBank::new(v)
    }

    fn ctx<'a>(bank: &'a MapperBank, aug: &'a AugParams) -> PairingContext<'a> {
        PairingContext {
            seen_styles: &[StyleId::A, StyleId::B, StyleId::C],
            mappers: bank,
            aug,
            msvcl_mode: MsvclMode::CrossView,
        }
    }

    #[test]
    fn positive_counts() {
        assert_eq!(count_possible_positives(8, 3).unwrap(), 24);
        assert_eq!(count_possible_positives(5, 4).unwrap(), 30);
        assert_eq!(count_possible_positives(1, 2).unwrap(), 1);
        assert!(count_possible_positives(3, 1).is_err());
    }

    #[test]
    fn simclr_pairs_adjacent_samples() {
        let (b, aug) = (bank(), AugParams::default());
        let subs: Vec<_> = (0..4).map(|i| subject(i, StyleId::A)).collect();
        let refs: Vec<_> = subs.iter().collect();
        let batch = build_batch(Scheme::SimClr, &refs, &ctx(&b, &aug), &mut seed::rng(0)).unwrap();
        assert_eq!(batch.len(), 8);
        assert_eq!(batch.positive_map, vec![1, 0, 3, 2, 5, 4, 7, 6]);
    }

    #[test]
    fn mvcl_pairs_cc_with_mlo_of_the_same_subject() {
        let (b, aug) = (bank(), AugParams::default());
        let subs: Vec<_> = (0..3).map(|i| subject(10 + i, StyleId::B)).collect();
        let refs: Vec<_> = subs.iter().collect();
        let batch = build_batch(Scheme::Mvcl, &refs, &ctx(&b, &aug), &mut seed::rng(1)).unwrap();
        for i in (0..6).step_by(2) {
            let (a, c) = (batch.sources[i], batch.sources[i + 1]);
            assert_eq!(a.subject_id, c.subject_id);
            assert_eq!((a.view, c.view), (View::Cc, View::Mlo));
        }
    }

    #[test]
    fn mscl_style_pairs_are_uniform_and_distinct() {
        let (b, aug) = (bank(), AugParams::identity());
        let s = subject(1, StyleId::C);
        let mut counts: BTreeMap<(StyleId, StyleId), usize> = BTreeMap::new();
        let mut rng = seed::rng(2);
        for _ in 0..3000 {
            let batch = build_batch(Scheme::Mscl, &[&s], &ctx(&b, &aug), &mut rng).unwrap();
            let (x, y) = (batch.sources[0].style, batch.sources[1].style);
            assert_ne!(x, y);
            *counts.entry((x.min(y), x.max(y))).or_default() += 1;
        }
        assert_eq!(counts.len(), 3);
        for (pair, c) in counts {
            let f = c as f64 / 3000.0;
            assert!((f - 1.0 / 3.0).abs() < 0.05, "{pair:?}: {f}");
        }
    }

    #[test]
    fn msvcl_pairs_cross_views_with_seen_styles() {
        let (b, aug) = (bank(), AugParams::default());
        let subs: Vec<_> = (0..5).map(|i| subject(i, StyleId::A)).collect();
        let refs: Vec<_> = subs.iter().collect();
        let batch = build_batch(Scheme::Msvcl, &refs, &ctx(&b, &aug), &mut seed::rng(3)).unwrap();
        batch.validate().unwrap();
        for pair in batch.sources.chunks(2) {
            assert_ne!(pair[0].view, pair[1].view);
        }
    }

    #[test]
    fn duplicate_subjects_and_unseen_styles_are_rejected() {
        let (b, aug) = (bank(), AugParams::default());
        let s = subject(4, StyleId::A);
        assert!(build_batch(Scheme::SimClr, &[&s, &s], &ctx(&b, &aug), &mut seed::rng(0)).is_err());
        let u = subject(5, StyleId::D);
        assert!(build_batch(Scheme::SimClr, &[&u], &ctx(&b, &aug), &mut seed::rng(0)).is_err());
    }

    #[test]
    fn same_seed_gives_identical_batches() {
        let (b, aug) = (bank(), AugParams::default());
        let subs: Vec<_> = (0..4).map(|i| subject(i, StyleId::B)).collect();
        let refs: Vec<_> = subs.iter().collect();
        for scheme in Scheme::ALL {
            let x = build_batch(scheme, &refs, &ctx(&b, &aug), &mut seed::rng(9)).unwrap();
            let y = build_batch(scheme, &refs, &ctx(&b, &aug), &mut seed::rng(9)).unwrap();
            assert_eq!(x.samples, y.samples);
            assert_eq!(x.sources, y.sources);
        }
    }
}
