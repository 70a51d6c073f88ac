/// Binary indexed tree over non-negative `f64` weights.
///
/// Supports point updates, prefix sums and inverse-CDF search in `O(log n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FenwickTree {
    // 1-based; tree[0] unused
    tree: Vec<f64>,
}

impl FenwickTree {
    pub fn new(n: usize) -> Self {
        Self {
            tree: vec![0.0; n + 1],
        }
    }

    /// Linear-time construction.
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mut tree = vec![0.0; n + 1];
        tree[1..].copy_from_slice(values);
        for i in 1..=n {
            let parent = i + (i & i.wrapping_neg());
            if parent <= n {
                tree[parent] += tree[i];
            }
        }
        Self { tree }
    }

    pub fn len(&self) -> usize {
        self.tree.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add(&mut self, index: usize, delta: f64) {
        let mut i = index + 1;
        while i < self.tree.len() {
            self.tree[i] += delta;
            i += i & i.wrapping_neg();
        }
    }

    /// Sum of the first `count` values.
    pub fn prefix_sum(&self, count: usize) -> f64 {
        let mut i = count.min(self.len());
        let mut sum = 0.0;
        while i > 0 {
            sum += self.tree[i];
            i &= i - 1;
        }
        sum
    }

    pub fn total(&self) -> f64 {
        self.prefix_sum(self.len())
    }

    /// Smallest index `i` with `prefix_sum(i + 1) > target`.
    ///
    /// Returns `len()` when `target` is not below the total.
    pub fn search(&self, target: f64) -> usize {
        let n = self.len();
        if n == 0 {
            return 0;
        }
        let mut pos = 0;
        let mut rem = target;
        let mut step = 1usize << (usize::BITS - 1 - n.leading_zeros());
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= rem {
                pos = next;
                rem -= self.tree[next];
            }
            step >>= 1;
        }
        pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn prefix_sums_match_running_sums() {
        let v = [0.5, 0.0, 2.0, 1.25, 3.0, 0.0, 0.75];
        let t = FenwickTree::from_values(&v);
        let mut run = 0.0;
        for (i, x) in v.iter().enumerate() {
            run += x;
            assert_eq!(t.prefix_sum(i + 1), run);
        }
        assert_eq!(t.total(), run);
    }

    #[test]
    fn search_skips_zero_weights() {
        let t = FenwickTree::from_values(&[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(t.search(0.0), 1);
        assert_eq!(t.search(0.999), 1);
        assert_eq!(t.search(1.0), 3);
        assert_eq!(t.search(2.0), 4);
    }

    proptest! {
        #[test]
        fn incremental_matches_batch_build(
            init in prop::collection::vec(0.0f64..10.0, 1..64),
            updates in prop::collection::vec((0usize..64, 0.0f64..10.0), 0..200),
        ) {
            let mut values = init.clone();
            let mut t = FenwickTree::from_values(&values);
            for (i, v) in updates {
                let i = i % values.len();
                t.add(i, v - values[i]);
                values[i] = v;
            }
            let fresh = FenwickTree::from_values(&values);
            let mut run = 0.0;
            for i in 0..values.len() {
                run += values[i];
                prop_assert!((t.prefix_sum(i + 1) - run).abs() <= 1e-9 * run.max(1.0));
                prop_assert!((fresh.prefix_sum(i + 1) - run).abs() <= 1e-9 * run.max(1.0));
            }
        }
    }
}
