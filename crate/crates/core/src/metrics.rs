//! Multilabel F1 aggregations and multi-cycle averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary predictions and ground truth, both `n × classes`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionSet {
    n: usize,
    classes: usize,
    y_hat: Vec<u8>,
    y_true: Vec<u8>,
}

impl PredictionSet {
    pub fn new(y_hat: Vec<u8>, y_true: Vec<u8>, classes: usize) -> Result<Self> {
        if classes == 0 || y_hat.len() != y_true.len() || y_hat.len() % classes != 0 {
            return Err(Error::dim("prediction_set", &[y_hat.len()], &[y_true.len(), classes]));
        }
        if y_hat.iter().chain(&y_true).any(|&v| v > 1) {
            return Err(Error::contract("predictions and labels must be 0 or 1"));
        }
        Ok(PredictionSet {
            n: y_hat.len() / classes,
            classes,
            y_hat,
            y_true,
        })
    }

    pub fn from_rows(y_hat: &[Vec<u8>], y_true: &[Vec<u8>]) -> Result<Self> {
        let classes = y_true.first().map_or(0, Vec::len);
        if y_hat.len() != y_true.len()
            || y_hat.iter().chain(y_true).any(|r| r.len() != classes)
        {
            return Err(Error::contract("ragged prediction rows"));
        }
        Self::new(y_hat.concat(), y_true.concat(), classes.max(1))
    }

    /// Thresholds `σ(logit) ≥ threshold`.
    pub fn from_logits(logits: &[f64], y_true: Vec<u8>, classes: usize, threshold: f64) -> Result<Self> {
        let y_hat = logits
            .iter()
            .map(|&l| (1.0 / (1.0 + (-l).exp()) >= threshold) as u8)
            .collect();
        Self::new(y_hat, y_true, classes)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn y_hat(&self) -> &[u8] {
        &self.y_hat
    }

    pub fn y_true(&self) -> &[u8] {
        &self.y_true
    }

    fn nonempty(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::contract("metrics need at least one sample"));
        }
        Ok(())
    }

    fn counts(&self, c: usize) -> Counts {
        let mut k = Counts::default();
        for i in 0..self.n {
            let (p, t) = (self.y_hat[i * self.classes + c], self.y_true[i * self.classes + c]);
            match (p, t) {
                (1, 1) => k.tp += 1,
                (1, 0) => k.fp += 1,
                (0, 1) => k.fn_ += 1,
                _ => {}
            }
        }
        k
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    tp: u64,
    fp: u64,
    fn_: u64,
}

impl Counts {
    fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    fn ratio(a: u64, b: u64) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of positive labels; a mean after aggregation.
    pub support: f64,
}

pub fn per_class_scores(p: &PredictionSet) -> Result<Vec<ClassScore>> {
    p.nonempty()?;
    Ok((0..p.classes)
        .map(|c| {
            let k = p.counts(c);
            ClassScore {
                precision: Counts::ratio(k.tp, k.tp + k.fp),
                recall: Counts::ratio(k.tp, k.tp + k.fn_),
                f1: k.f1(),
                support: (k.tp + k.fn_) as f64,
            }
        })
        .collect())
}

/// Mean over samples of `2|ŷ ∩ y| / (|ŷ| + |y|)`; an empty prediction for an
/// empty truth scores 1.
pub fn f1_samples(p: &PredictionSet) -> Result<f64> {
    p.nonempty()?;
    let total: f64 = (0..p.n)
        .map(|i| {
            let row = i * p.classes..(i + 1) * p.classes;
            let (h, t) = (&p.y_hat[row.clone()], &p.y_true[row]);
            let inter = h.iter().zip(t).filter(|(a, b)| **a == 1 && **b == 1).count();
            let sizes = h.iter().chain(t).filter(|v| **v == 1).count();
            if sizes == 0 {
                1.0
            } else {
                2.0 * inter as f64 / sizes as f64
            }
        })
        .sum();
    Ok(total / p.n as f64)
}

/// F1 of the TP/FP/FN counts pooled over every cell.
pub fn f1_micro(p: &PredictionSet) -> Result<f64> {
    p.nonempty()?;
    let pooled = (0..p.classes).map(|c| p.counts(c)).fold(Counts::default(), |a, k| Counts {
        tp: a.tp + k.tp,
        fp: a.fp + k.fp,
        fn_: a.fn_ + k.fn_,
    });
    Ok(pooled.f1())
}

/// Unweighted mean of per-class F1.
pub fn f1_macro(p: &PredictionSet) -> Result<f64> {
    let scores = per_class_scores(p)?;
    let empty = scores.iter().filter(|s| s.support == 0.0).count();
    if empty > 0 {
        log::warn!("{empty} class(es) without positive labels count as F1 0 in the macro average");
    }
    Ok(scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64)
}

/// Support-weighted mean of per-class F1.
pub fn f1_weighted(p: &PredictionSet) -> Result<f64> {
    let all: Vec<usize> = (0..p.classes).collect();
    f1_weighted_classes(p, &all)
}

/// [`f1_weighted`] restricted to the listed classes.
pub fn f1_weighted_classes(p: &PredictionSet, classes: &[usize]) -> Result<f64> {
    let scores = per_class_scores(p)?;
    if let Some(&bad) = classes.iter().find(|&&c| c >= p.classes) {
        return Err(Error::contract(format!("class {bad} out of range")));
    }
    Ok(weighted_mean(classes.iter().map(|&c| &scores[c])))
}

fn weighted_mean<'a>(scores: impl Iterator<Item = &'a ClassScore>) -> f64 {
    let (num, den) = scores.fold((0.0, 0.0), |(n, d), s| (n + s.support * s.f1, d + s.support));
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Sample standard deviations of the four scores across cycles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSpread {
    pub micro: f64,
    #[serde(rename = "macro")]
    pub macro_: f64,
    pub weighted: f64,
    pub samples: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub micro: f64,
    #[serde(rename = "macro")]
    pub macro_: f64,
    pub weighted: f64,
    pub samples: f64,
    pub per_class: Vec<ClassScore>,
    pub cycles: usize,
    pub std: ScoreSpread,
}

impl MetricsReport {
    pub fn from_predictions(p: &PredictionSet) -> Result<Self> {
        let per_class = per_class_scores(p)?;
        Ok(MetricsReport {
            micro: f1_micro(p)?,
            macro_: f1_macro(p)?,
            weighted: weighted_mean(per_class.iter()),
            samples: f1_samples(p)?,
            per_class,
            cycles: 1,
            std: ScoreSpread::default(),
        })
    }

    /// Support-weighted F1 over the listed classes.
    pub fn weighted_over(&self, classes: &[usize]) -> f64 {
        weighted_mean(classes.iter().filter_map(|&c| self.per_class.get(c)))
    }

    pub fn scores(&self) -> [f64; 4] {
        [self.micro, self.macro_, self.weighted, self.samples]
    }
}

/// Field-wise mean of several reports, with sample standard deviations of
/// the four scores.
pub fn aggregate_cycles(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::contract("aggregate_cycles needs at least one report"))?;
    let classes = first.per_class.len();
    if reports.iter().any(|r| r.per_class.len() != classes) {
        return Err(Error::contract("reports disagree on class count"));
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let sd = |f: &dyn Fn(&MetricsReport) -> f64| {
        if reports.len() < 2 {
            return 0.0;
        }
        let m = mean(f);
        (reports.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let per_class = (0..classes)
        .map(|c| ClassScore {
            precision: mean(&|r| r.per_class[c].precision),
            recall: mean(&|r| r.per_class[c].recall),
            f1: mean(&|r| r.per_class[c].f1),
            support: mean(&|r| r.per_class[c].support),
        })
        .collect();
    Ok(MetricsReport {
        micro: mean(&|r| r.micro),
        macro_: mean(&|r| r.macro_),
        weighted: mean(&|r| r.weighted),
        samples: mean(&|r| r.samples),
        per_class,
        cycles: reports.len(),
        std: ScoreSpread {
            micro: sd(&|r| r.micro),
            macro_: sd(&|r| r.macro_),
            weighted: sd(&|r| r.weighted),
            samples: sd(&|r| r.samples),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps(h: &[&[u8]], t: &[&[u8]]) -> PredictionSet {
        let h: Vec<Vec<u8>> = h.iter().map(|r| r.to_vec()).collect();
        let t: Vec<Vec<u8>> = t.iter().map(|r| r.to_vec()).collect();
        PredictionSet::from_rows(&h, &t).unwrap()
    }

    #[test]
    fn samples_examples() {
        assert_eq!(f1_samples(&ps(&[&[1, 0, 1]], &[&[1, 0, 1]])).unwrap(), 1.0);
        let v = f1_samples(&ps(&[&[1, 0, 0]], &[&[1, 1, 0]])).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_samples(&ps(&[&[0, 0]], &[&[0, 0]])).unwrap(), 1.0);
        assert_eq!(f1_samples(&ps(&[&[0, 0]], &[&[0, 1]])).unwrap(), 0.0);
    }

    #[test]
    fn pooled_and_per_class_examples() {
        let p = ps(&[&[1, 0], &[1, 1]], &[&[1, 0], &[0, 1]]);
        let per = per_class_scores(&p).unwrap();
        assert!((per[0].precision - 0.5).abs() < 1e-15 && per[0].recall == 1.0);
        assert!((per[0].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(per[1].f1, 1.0);
        assert!((f1_macro(&p).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!((f1_micro(&p).unwrap() - 0.8).abs() < 1e-15);
        assert!((f1_weighted(&p).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_all_negative() {
        let p = ps(&[&[1, 0], &[0, 1]], &[&[1, 0], &[0, 1]]);
        let r = MetricsReport::from_predictions(&p).unwrap();
        assert_eq!(r.scores(), [1.0; 4]);
        let p = ps(&[&[0, 0], &[0, 0]], &[&[1, 0], &[0, 1]]);
        let r = MetricsReport::from_predictions(&p).unwrap();
        assert_eq!([r.micro, r.macro_, r.weighted], [0.0; 3]);
    }

    #[test]
    fn errors() {
        let p = PredictionSet::new(vec![], vec![], 3).unwrap();
        assert!(matches!(f1_samples(&p), Err(Error::Contract(_))));
        assert!(matches!(f1_micro(&p), Err(Error::Contract(_))));
        assert!(PredictionSet::new(vec![2], vec![1], 1).is_err());
        assert!(PredictionSet::new(vec![1, 0], vec![1], 1).is_err());
        assert!(aggregate_cycles(&[]).is_err());
    }

    #[test]
    fn logits_threshold() {
        let p = PredictionSet::from_logits(&[30.0, -30.0, 0.0], vec![1, 0, 1], 3, 0.5).unwrap();
        assert_eq!(p.y_hat(), &[1, 0, 1]);
    }

    #[test]
    fn aggregation() {
        let p = ps(&[&[1, 0], &[1, 1]], &[&[1, 0], &[0, 1]]);
        let r = MetricsReport::from_predictions(&p).unwrap();
        assert_eq!(aggregate_cycles(std::slice::from_ref(&r)).unwrap(), r);
        let mut a = r.clone();
        let mut b = r.clone();
        a.weighted = 0.6;
        b.weighted = 0.7;
        let m = aggregate_cycles(&[a, b]).unwrap();
        assert!((m.weighted - 0.65).abs() < 1e-15);
        assert_eq!(m.cycles, 2);
        let five = aggregate_cycles(&vec![r.clone(); 5]).unwrap();
        assert_eq!(five.scores(), r.scores());
        assert_eq!(five.std, ScoreSpread::default());
        assert_eq!(five.cycles, 5);
    }

    #[test]
    fn class_subset_weighting() {
        let p = ps(&[&[1, 0, 1], &[1, 1, 0]], &[&[1, 0, 1], &[0, 1, 1]]);
        let per = per_class_scores(&p).unwrap();
        let want = (per[1].f1 * per[1].support + per[2].f1 * per[2].support)
            / (per[1].support + per[2].support);
        assert!((f1_weighted_classes(&p, &[1, 2]).unwrap() - want).abs() < 1e-15);
        let r = MetricsReport::from_predictions(&p).unwrap();
        assert!((r.weighted_over(&[1, 2]) - want).abs() < 1e-15);
    }

    fn arb_set() -> impl proptest::strategy::Strategy<Value = PredictionSet> {
        use proptest::prelude::*;
        (1usize..=20).prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..=1, n * 5),
                proptest::collection::vec(0u8..=1, n * 5),
            )
                .prop_map(|(h, t)| PredictionSet::new(h, t, 5).unwrap())
        })
    }

    proptest::proptest! {
        #[test]
        fn macro_between_class_extremes(p in arb_set()) {
            let per = per_class_scores(&p).unwrap();
            let m = f1_macro(&p).unwrap();
            let lo = per.iter().map(|s| s.f1).fold(f64::INFINITY, f64::min);
            let hi = per.iter().map(|s| s.f1).fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert!(lo - 1e-12 <= m && m <= hi + 1e-12);
        }

        #[test]
        fn sample_order_does_not_matter(p in arb_set(), seed in 0u64..1000) {
            let mut order: Vec<usize> = (0..p.len()).collect();
            crate::random::Rng::new(seed).shuffle(&mut order);
            let pick = |v: &[u8]| order.iter().flat_map(|&i| v[i * 5..i * 5 + 5].to_vec()).collect();
            let q = PredictionSet::new(pick(p.y_hat()), pick(p.y_true()), 5).unwrap();
            let a = MetricsReport::from_predictions(&p).unwrap();
            let b = MetricsReport::from_predictions(&q).unwrap();
            for (x, y) in a.scores().iter().zip(b.scores()) {
                proptest::prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn fixing_a_false_negative_never_lowers_micro(p in arb_set()) {
            let before = f1_micro(&p).unwrap();
            if let Some(i) = (0..p.y_hat().len()).find(|&i| p.y_hat()[i] == 0 && p.y_true()[i] == 1) {
                let mut h = p.y_hat().to_vec();
                h[i] = 1;
                let q = PredictionSet::new(h, p.y_true().to_vec(), 5).unwrap();
                proptest::prop_assert!(f1_micro(&q).unwrap() >= before);
            }
        }

        #[test]
        fn scores_in_unit_interval(p in arb_set()) {
            let r = MetricsReport::from_predictions(&p).unwrap();
            for s in r.scores() {
                proptest::prop_assert!((0.0..=1.0).contains(&s));
            }
        }
    }
}
