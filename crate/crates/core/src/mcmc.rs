use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Iteration budget of one chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainSettings {
    pub iters: usize,
    pub burnin: usize,
    pub thin: usize,
}

impl ChainSettings {
    pub fn new(iters: usize, burnin: usize, thin: usize) -> Result<Self> {
        let s = ChainSettings { iters, burnin, thin };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters <= self.burnin {
            return Err(Error::Validation(format!(
                "iters ({}) must exceed burnin ({})",
                self.iters, self.burnin
            )));
        }
        if self.thin == 0 {
            return Err(Error::Validation("thin must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_retained(&self, iteration: usize) -> bool {
        iteration >= self.burnin && (iteration - self.burnin).is_multiple_of(self.thin)
    }

    pub fn n_retained(&self) -> usize {
        (self.iters - self.burnin).div_ceil(self.thin)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retained_count_matches_filter() {
        for (it, b, t) in [(10, 0, 1), (10, 3, 2), (5000, 1000, 7), (2, 1, 5)] {
            let s = ChainSettings::new(it, b, t).unwrap();
            assert_eq!(s.n_retained(), (0..it).filter(|&i| s.is_retained(i)).count());
        }
        assert!(ChainSettings::new(5, 5, 1).is_err());
        assert!(ChainSettings::new(5, 0, 0).is_err());
    }
}
