//! Segmentation metrics: per-class IoU, instance-weighted iIoU and IoU
//! restricted to invalid (ambiguous) regions.
//!
//! Every accumulator holds integer counts or per-instance records, so
//! per-image accumulation can run in any order and merge afterwards with
//! identical results.

use std::collections::BTreeMap;

use serde::ser::{SerializeMap, Serializer};
use serde::Serialize;

use crate::error::{invalid, shape_err, Result};
use crate::raster::{Grid, InstanceMap, InvalidMask, LabelMap, IGNORE_LABEL};
use crate::tensor::Tensor;

fn check_dims<A: Copy, B: Copy>(a: &Grid<A>, b: &Grid<B>, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return shape_err(format!("{what}: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

fn check_pred(p: u16, k: usize) -> Result<()> {
    if p as usize >= k {
        return invalid(format!("predicted class {p} out of range for {k} classes"));
    }
    Ok(())
}

fn check_gt(g: u16, k: usize) -> Result<()> {
    if g != IGNORE_LABEL && g as usize >= k {
        return invalid(format!("ground-truth class {g} out of range for {k} classes"));
    }
    Ok(())
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

fn mean(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.into_iter().flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Argmax over the class axis of `K×H×W` logits; ties go to the lower class.
pub fn argmax_labels(logits: &Tensor) -> Result<LabelMap> {
    let (k, h, w) = logits.dims3()?;
    if k == 0 || k > IGNORE_LABEL as usize {
        return invalid(format!("{k} classes"));
    }
    let n = h * w;
    let d = logits.data();
    let labels = (0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + p] > d[best * n + p] {
                    best = c;
                }
            }
            best as u16
        })
        .collect();
    LabelMap::new(h, w, labels)
}

/// `K×K` pixel counts, rows indexed by ground truth, columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    k: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Confusion {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image; ignore pixels are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        check_dims(pred, gt, "prediction and ground truth differ")?;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            check_gt(g, self.k)?;
            if g == IGNORE_LABEL {
                continue;
            }
            check_pred(p, self.k)?;
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.k != self.k {
            return invalid(format!("merging {} and {} class confusions", self.k, other.k));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn true_positives(&self, z: usize) -> u64 {
        self.get(z, z)
    }

    pub fn false_negatives(&self, z: usize) -> u64 {
        (0..self.k).filter(|&p| p != z).map(|p| self.get(z, p)).sum()
    }

    pub fn false_positives(&self, z: usize) -> u64 {
        (0..self.k).filter(|&g| g != z).map(|g| self.get(g, z)).sum()
    }

    /// `TP/(TP+FN+FP)`, `None` when the class never occurs in either map.
    pub fn iou(&self, z: usize) -> Option<f64> {
        let tp = self.true_positives(z);
        ratio(
            tp as f64,
            (tp + self.false_negatives(z) + self.false_positives(z)) as f64,
        )
    }

    pub fn ious(&self) -> Vec<Option<f64>> {
        (0..self.k).map(|z| self.iou(z)).collect()
    }

    /// Mean over classes with a defined IoU.
    pub fn miou(&self) -> Option<f64> {
        mean(self.ious())
    }
}

/// One ground-truth instance: its class, pixel count and correctly
/// predicted pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct InstanceRecord {
    pub class: u16,
    pub size: u64,
    pub hits: u64,
}

/// Instance-weighted IoU: true positives and false negatives inside an
/// instance are weighted by `mean instance size of the class / instance
/// size`; false positives stay unweighted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceIou {
    k: usize,
    records: Vec<InstanceRecord>,
    false_positives: Vec<u64>,
}

impl InstanceIou {
    pub fn new(k: usize) -> Self {
        InstanceIou {
            k,
            records: Vec::new(),
            false_positives: vec![0; k],
        }
    }

    pub fn records(&self) -> &[InstanceRecord] {
        &self.records
    }

    /// Adds one image. Instance 0 means "no instance"; an instance id may
    /// cover pixels of only one class.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, instances: &InstanceMap) -> Result<()> {
        check_dims(pred, gt, "prediction and ground truth differ")?;
        check_dims(instances, gt, "instance map and ground truth differ")?;
        let mut found: BTreeMap<u16, InstanceRecord> = BTreeMap::new();
        for ((&p, &g), &id) in pred.data().iter().zip(gt.data()).zip(instances.data()) {
            check_gt(g, self.k)?;
            if g == IGNORE_LABEL {
                continue;
            }
            check_pred(p, self.k)?;
            if p != g {
                self.false_positives[p as usize] += 1;
            }
            if id == 0 {
                continue;
            }
            let rec = found.entry(id).or_insert(InstanceRecord {
                class: g,
                size: 0,
                hits: 0,
            });
            if rec.class != g {
                return invalid(format!("instance {id} covers classes {} and {g}", rec.class));
            }
            rec.size += 1;
            rec.hits += u64::from(p == g);
        }
        self.records.extend(found.into_values());
        self.records.sort_unstable();
        Ok(())
    }

    pub fn merge(&mut self, other: &InstanceIou) -> Result<()> {
        if other.k != self.k {
            return invalid(format!("merging {} and {} class accumulators", self.k, other.k));
        }
        self.records.extend_from_slice(&other.records);
        self.records.sort_unstable();
        self.false_positives
            .iter_mut()
            .zip(&other.false_positives)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `None` for classes without instances.
    pub fn iiou(&self, z: usize) -> Option<f64> {
        let of_class: Vec<&InstanceRecord> = self.records.iter().filter(|r| r.class as usize == z).collect();
        if of_class.is_empty() {
            return None;
        }
        let mean_size = of_class.iter().map(|r| r.size as f64).sum::<f64>() / of_class.len() as f64;
        let (mut itp, mut ifn) = (0.0, 0.0);
        for r in &of_class {
            let w = mean_size / r.size as f64;
            itp += w * r.hits as f64;
            ifn += w * (r.size - r.hits) as f64;
        }
        ratio(itp, itp + ifn + self.false_positives[z] as f64)
    }

    pub fn iious(&self) -> Vec<Option<f64>> {
        (0..self.k).map(|z| self.iiou(z)).collect()
    }

    pub fn miiou(&self) -> Option<f64> {
        mean(self.iious())
    }
}

/// IoU restricted to invalid-mask pixels, summed over all images before the
/// ratio is taken.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedIou {
    k: usize,
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl MaskedIou {
    pub fn new(k: usize) -> Self {
        MaskedIou {
            k,
            intersection: vec![0; k],
            union: vec![0; k],
        }
    }

    pub fn intersection(&self, z: usize) -> u64 {
        self.intersection[z]
    }

    pub fn union(&self, z: usize) -> u64 {
        self.union[z]
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, mask: &InvalidMask) -> Result<()> {
        check_dims(pred, gt, "prediction and ground truth differ")?;
        check_dims(mask, gt, "invalid mask and ground truth differ")?;
        for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
            check_gt(g, self.k)?;
            if !m || g == IGNORE_LABEL {
                continue;
            }
            check_pred(p, self.k)?;
            if p == g {
                self.intersection[g as usize] += 1;
                self.union[g as usize] += 1;
            } else {
                self.union[g as usize] += 1;
                self.union[p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MaskedIou) -> Result<()> {
        if other.k != self.k {
            return invalid(format!("merging {} and {} class accumulators", self.k, other.k));
        }
        for z in 0..self.k {
            self.intersection[z] += other.intersection[z];
            self.union[z] += other.union[z];
        }
        Ok(())
    }

    pub fn ia_iou(&self, z: usize) -> Option<f64> {
        ratio(self.intersection[z] as f64, self.union[z] as f64)
    }

    pub fn ia_ious(&self) -> Vec<Option<f64>> {
        (0..self.k).map(|z| self.ia_iou(z)).collect()
    }

    pub fn mia_iou(&self) -> Option<f64> {
        mean(self.ia_ious())
    }
}

/// All three metrics over a set of images. Instance maps and invalid masks
/// are optional per image; the corresponding metric only sees images that
/// supply them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Evaluator {
    pub confusion: Confusion,
    pub instances: InstanceIou,
    pub masked: MaskedIou,
}

impl Evaluator {
    pub fn new(k: usize) -> Self {
        Evaluator {
            confusion: Confusion::new(k),
            instances: InstanceIou::new(k),
            masked: MaskedIou::new(k),
        }
    }

    pub fn add(
        &mut self,
        pred: &LabelMap,
        gt: &LabelMap,
        instances: Option<&InstanceMap>,
        mask: Option<&InvalidMask>,
    ) -> Result<()> {
        self.confusion.accumulate(pred, gt)?;
        if let Some(inst) = instances {
            self.instances.accumulate(pred, gt, inst)?;
        }
        if let Some(m) = mask {
            self.masked.accumulate(pred, gt, m)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Evaluator) -> Result<()> {
        self.confusion.merge(&other.confusion)?;
        self.instances.merge(&other.instances)?;
        self.masked.merge(&other.masked)
    }

    /// `names` labels the classes in order; missing names become the
    /// class index.
    pub fn report(&self, names: &[&str]) -> MetricsReport {
        let k = self.confusion.classes();
        let per_class = (0..k)
            .map(|z| {
                let name = names.get(z).map_or_else(|| z.to_string(), |n| n.to_string());
                (
                    name,
                    ClassScores {
                        iou: self.confusion.iou(z),
                        iiou: self.instances.iiou(z),
                        ia_iou: self.masked.ia_iou(z),
                    },
                )
            })
            .collect();
        MetricsReport {
            per_class: PerClass(per_class),
            miou: self.confusion.miou(),
            miiou: self.instances.miiou(),
            mia_iou: self.masked.mia_iou(),
            pixels_evaluated: self.confusion.total(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassScores {
    pub iou: Option<f64>,
    pub iiou: Option<f64>,
    pub ia_iou: Option<f64>,
}

/// Class scores in class order; serialized as a JSON object.
#[derive(Clone, Debug, PartialEq)]
pub struct PerClass(pub Vec<(String, ClassScores)>);

impl Serialize for PerClass {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (name, scores) in &self.0 {
            map.serialize_entry(name, scores)?;
        }
        map.end()
    }
}

/// Undefined scores serialize as `null`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_class: PerClass,
    pub miou: Option<f64>,
    pub miiou: Option<f64>,
    pub mia_iou: Option<f64>,
    pub pixels_evaluated: u64,
}
