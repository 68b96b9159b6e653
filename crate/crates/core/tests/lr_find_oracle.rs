//! Gradient descent on `f(w) = a w²` is stable only for `lr < 1/a`, so a
//! sound learning-rate search must suggest a rate below that bound.

use twinstage_core::schedule::{lr_find, LrFindConfig, LrFindStatus, LrProbe};

struct Quadratic {
    a: f64,
    w: f64,
}

impl LrProbe for Quadratic {
    type Snapshot = f64;
    fn snapshot(&self) -> f64 {
        self.w
    }
    fn restore(&mut self, w: f64) {
        self.w = w;
    }
    fn train_step(&mut self, _iteration: usize, lr: f64) -> f64 {
        let loss = self.a * self.w * self.w;
        self.w -= lr * 2.0 * self.a * self.w;
        loss
    }
}

#[test]
fn suggestion_respects_stability_bound() {
    for a in [0.5, 1.0, 4.0, 50.0] {
        let mut q = Quadratic { a, w: 3.0 };
        let r = lr_find(&mut q, &LrFindConfig::default()).unwrap();
        assert_eq!(q.w, 3.0, "state restored");
        assert_eq!(r.status, LrFindStatus::Ok);
        let s = r.suggestion.expect("a valley exists");
        assert!(s < 1.0 / a, "a={a}: suggestion {s} beyond stability bound {}", 1.0 / a);
        assert!(r.lrs.contains(&s), "suggestion is a sampled rate");
        let imin = (0..r.smoothed_losses.len())
            .min_by(|&i, &j| r.smoothed_losses[i].total_cmp(&r.smoothed_losses[j]))
            .unwrap();
        assert!(s < r.lrs[imin] && s > r.lrs[0]);
    }
}

#[test]
fn search_stops_on_divergence() {
    let mut q = Quadratic { a: 100.0, w: 1.0 };
    let r = lr_find(&mut q, &LrFindConfig::default()).unwrap();
    let best = r.smoothed_losses.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(r.lrs.len() < 100, "stopped early");
    let last = *r.smoothed_losses.last().unwrap();
    assert!(last > 4.0 * best || !last.is_finite());
}

struct Rising;

impl LrProbe for Rising {
    type Snapshot = ();
    fn snapshot(&self) {}
    fn restore(&mut self, _: ()) {}
    fn train_step(&mut self, i: usize, _lr: f64) -> f64 {
        1.0 + i as f64 * 1e-3
    }
}

#[test]
fn monotone_rising_curve_has_no_valley() {
    let r = lr_find(&mut Rising, &LrFindConfig::default()).unwrap();
    assert_eq!(r.status, LrFindStatus::NoValley);
    assert!(r.suggestion.is_none());
}
