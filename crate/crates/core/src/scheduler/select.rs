use serde::{Deserialize, Serialize};

use super::RequestPriorityView;
use crate::RequestId;

/// Strict-improvement threshold for accepting a swap.
const SWAP_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Selected request ids in priority order.
    pub selected: Vec<RequestId>,
    /// Objective of the final selection.
    pub value: f64,
    /// Objective of the greedy pass alone.
    pub greedy_value: f64,
    pub swaps: usize,
}

/// Objective contribution of running `view` this interval.
///
/// The penalty term charges requests left out, so selecting a request earns
/// its value plus the penalty it avoids. Up to a constant this equals the
/// selected requests' value minus the penalty of the rest.
pub fn selection_gain(view: &RequestPriorityView, penalty_weight: f64) -> f64 {
    view.v * view.t_eff() + penalty_weight * view.phi
}

pub fn selection_value(views: &[RequestPriorityView], picked: &[usize], penalty_weight: f64) -> f64 {
    picked
        .iter()
        .map(|&i| selection_gain(&views[i], penalty_weight))
        .sum()
}

/// Candidate indices by descending penalty, then value-time, then rate;
/// ties by arrival and id.
pub fn greedy_order(views: &[RequestPriorityView]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&views[a], &views[b]);
        y.phi
            .total_cmp(&x.phi)
            .then((y.v * y.t_prime).total_cmp(&(x.v * x.t_prime)))
            .then(y.r.total_cmp(&x.r))
            .then(x.arrival_time.total_cmp(&y.arrival_time))
            .then(x.request_id.cmp(&y.request_id))
    });
    order
}

/// Walks `order` and takes every request that still fits.
fn fill(order: &[usize], lengths: &[u64], mem: u64, max_batch: usize) -> Vec<usize> {
    let mut left = mem;
    let mut picked = Vec::new();
    for &i in order {
        if picked.len() == max_batch {
            break;
        }
        if lengths[i] <= left {
            left -= lengths[i];
            picked.push(i);
        }
    }
    picked
}

fn ids(views: &[RequestPriorityView], picked: &[usize]) -> Vec<RequestId> {
    picked.iter().map(|&i| views[i].request_id).collect()
}

/// Greedy pass only.
pub fn select_batch_greedy(
    views: &[RequestPriorityView],
    lengths: &[u64],
    mem: u64,
    max_batch: usize,
    penalty_weight: f64,
) -> Selection {
    assert_eq!(views.len(), lengths.len());
    let picked = fill(&greedy_order(views), lengths, mem, max_batch);
    let value = selection_value(views, &picked, penalty_weight);
    Selection {
        selected: ids(views, &picked),
        value,
        greedy_value: value,
        swaps: 0,
    }
}

/// Greedy fill followed by adjacent-swap local search over the priority
/// order. Every returned selection satisfies `|S| <= max_batch` and
/// `sum(lengths) <= mem`.
pub fn select_batch(
    views: &[RequestPriorityView],
    lengths: &[u64],
    mem: u64,
    max_batch: usize,
    penalty_weight: f64,
) -> Selection {
    assert_eq!(views.len(), lengths.len());
    let n = views.len();
    let mut order = greedy_order(views);
    let mut best = fill(&order, lengths, mem, max_batch);
    let mut best_value = selection_value(views, &best, penalty_weight);
    let greedy_value = best_value;
    let mut swaps = 0;
    for _ in 0..n.max(1) * n.max(1) {
        let mut improved = false;
        for k in 0..n.saturating_sub(1) {
            order.swap(k, k + 1);
            let picked = fill(&order, lengths, mem, max_batch);
            let value = selection_value(views, &picked, penalty_weight);
            if value > best_value + SWAP_EPS {
                best = picked;
                best_value = value;
                swaps += 1;
                improved = true;
            } else {
                order.swap(k, k + 1);
            }
        }
        if !improved {
            break;
        }
    }
    Selection {
        selected: ids(views, &best),
        value: best_value,
        greedy_value,
        swaps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::SchedulerConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn view(id: u32, b_rem: f64, r: f64, v: f64, t_overhead: f64) -> RequestPriorityView {
        RequestPriorityView::new(id, id as f64, b_rem, r, v, 1.0, t_overhead, 0.0, &SchedulerConfig::default())
    }

    fn brute_force(views: &[RequestPriorityView], lengths: &[u64], mem: u64, b: usize) -> f64 {
        let n = views.len();
        let mut best = 0.0f64;
        for mask in 0u32..(1 << n) {
            let picked: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let used: u64 = picked.iter().map(|&i| lengths[i]).sum();
            if picked.len() <= b && used <= mem {
                best = best.max(selection_value(views, &picked, 1.0));
            }
        }
        best
    }

    #[test]
    fn empty_buffer_wins_single_slot() {
        let views = [view(0, 0.0, 20.0, 1.0, 0.0), view(1, 10_000.0, 20.0, 1.0, 0.0)];
        let s = select_batch(&views, &[100, 100], 100, 4, 1.0);
        assert_eq!(s.selected, vec![0]);
    }

    #[test]
    fn unconstrained_selects_all() {
        let views = [view(0, 5.0, 20.0, 1.0, 0.0), view(1, 50.0, 30.0, 0.5, 0.1), view(2, 0.0, 10.0, 1.0, 0.0)];
        let s = select_batch(&views, &[10, 10, 10], 1000, 8, 1.0);
        assert_eq!(s.selected.len(), 3);
        assert_eq!(s.swaps, 0);
    }

    #[test]
    fn nothing_fits() {
        let views = [view(0, 0.0, 20.0, 1.0, 0.0)];
        let s = select_batch(&views, &[500], 100, 4, 1.0);
        assert!(s.selected.is_empty());
    }

    #[test]
    fn local_search_never_loses_to_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let n = rng.gen_range(1..=8);
            let views: Vec<_> = (0..n)
                .map(|i| {
                    view(
                        i as u32,
                        rng.gen_range(0.0..200.0),
                        rng.gen_range(5.0..40.0),
                        rng.gen_range(0.0..=1.0),
                        rng.gen_range(0.0..1.2),
                    )
                })
                .collect();
            let lengths: Vec<u64> = (0..n).map(|_| rng.gen_range(50..600)).collect();
            let mem = rng.gen_range(100..1500);
            let b = rng.gen_range(1..=n);
            let s = select_batch(&views, &lengths, mem, b, 1.0);
            assert!(s.value + 1e-12 >= s.greedy_value);
            let opt = brute_force(&views, &lengths, mem, b);
            assert!(s.value <= opt + 1e-9);
        }
    }

    proptest::proptest! {
        #[test]
        fn scaling_preserves_selection(
            raw in proptest::collection::vec((0.0f64..100.0, 5.0f64..40.0, 0.0f64..=1.0, 10u64..300), 1..8),
            mem in 50u64..1000,
            scale in 0.1f64..10.0,
        ) {
            let c = SchedulerConfig::default();
            let views: Vec<_> = raw.iter().enumerate()
                .map(|(i, &(b, r, v, _))| RequestPriorityView::new(i as u32, i as f64, b, r, v, 1.0, 0.2, 0.0, &c))
                .collect();
            let scaled: Vec<_> = views.iter().map(|w| RequestPriorityView { v: w.v * scale, phi: w.phi, ..*w }).collect();
            let lengths: Vec<u64> = raw.iter().map(|t| t.3).collect();
            let a = select_batch(&views, &lengths, mem, 4, 1.0);
            let b = select_batch(&scaled, &lengths, mem, 4, scale);
            proptest::prop_assert_eq!(a.selected, b.selected);
        }
    }
}
