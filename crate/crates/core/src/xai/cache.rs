use std::collections::HashMap;

use super::{Explanation, XaiMethod};
use crate::error::Result;

/// Memoizes explanations per `(sample, method)`.
///
/// With `refresh_every = n > 0` an entry is recomputed on the lookup after
/// it has been served `n` times; `0` keeps entries forever.
#[derive(Debug, Default)]
pub struct ExplanationCache {
    refresh_every: usize,
    entries: HashMap<(usize, XaiMethod), (Explanation, usize)>,
    computed: usize,
}

impl ExplanationCache {
    pub fn new(refresh_every: usize) -> Self {
        Self {
            refresh_every,
            ..Default::default()
        }
    }

    pub fn get_or_compute(
        &mut self,
        sample: usize,
        method: XaiMethod,
        compute: impl FnOnce() -> Result<Explanation>,
    ) -> Result<&Explanation> {
        let key = (sample, method);
        let stale = match self.entries.get(&key) {
            None => true,
            Some((_, served)) => self.refresh_every > 0 && *served >= self.refresh_every,
        };
        if stale {
            let e = compute()?;
            self.computed += 1;
            self.entries.insert(key, (e, 0));
        }
        let entry = self.entries.get_mut(&key).expect("entry inserted above");
        entry.1 += 1;
        Ok(&entry.0)
    }

    /// Number of explanations actually computed so far.
    pub fn computed(&self) -> usize {
        self.computed
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn dummy() -> Result<Explanation> {
        Ok(Explanation::new(Tensor::zeros([2]), XaiMethod::Ig, 0))
    }

    #[test]
    fn refresh_counts() {
        let mut never = ExplanationCache::new(0);
        for _ in 0..5 {
            never.get_or_compute(0, XaiMethod::Ig, dummy).unwrap();
        }
        assert_eq!(never.computed(), 1);

        let mut every2 = ExplanationCache::new(2);
        for _ in 0..5 {
            every2.get_or_compute(0, XaiMethod::Ig, dummy).unwrap();
        }
        assert_eq!(every2.computed(), 3);
        every2.get_or_compute(0, XaiMethod::Lrp, dummy).unwrap();
        assert_eq!(every2.computed(), 4);
    }
}
