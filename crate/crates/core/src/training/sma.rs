//! Simple moving average of recent checkpoints, fed back into training.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Phase};
use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmaConfig {
    #[serde(default = "default_window")]
    pub window: usize,
    /// Tokens between feedbacks of the average into the live weights.
    pub interval: u64,
}

fn default_window() -> usize {
    6
}

impl SmaConfig {
    pub fn new(window: usize, interval: u64) -> Self {
        SmaConfig { window, interval }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::config("sma.window", "must be >= 1"));
        }
        if self.interval == 0 {
            return Err(Error::config("sma.interval", "must be > 0"));
        }
        if self.interval < self.window as u64 {
            return Err(Error::config("sma.interval", "must be >= window"));
        }
        Ok(())
    }

    /// Tokens between ring-buffer snapshots.
    pub fn snapshot_spacing(&self) -> u64 {
        self.interval / self.window as u64
    }
}

/// Element-wise mean of parameter stores with identical layout. Each scalar
/// is summed in f64 over its sorted values, so the result does not depend
/// on the order of `stores`.
pub fn average_params(stores: &[&ParamStore<f32>]) -> Result<ParamStore<f32>> {
    let first = *stores
        .first()
        .ok_or_else(|| Error::Empty("cannot average zero checkpoints".into()))?;
    if let Some(i) = stores.iter().position(|s| !first.same_layout(s)) {
        return Err(Error::Incompatible(format!(
            "checkpoint {i} has different parameter names or shapes"
        )));
    }
    let n = stores.len() as f64;
    let mut out = first.clone();
    let mut column = Vec::with_capacity(stores.len());
    for (name, p) in out.iter_mut() {
        let sources: Vec<&[f32]> = stores
            .iter()
            .map(|s| s.get(name).expect("same layout").data.as_slice())
            .collect();
        for (j, dst) in p.data.iter_mut().enumerate() {
            column.clear();
            column.extend(sources.iter().map(|d| d[j]));
            column.sort_by(f32::total_cmp);
            let sum: f64 = column.iter().map(|&x| f64::from(x)).sum();
            *dst = (sum / n) as f32;
        }
    }
    Ok(out)
}

/// Averages `checkpoints`. Metadata and optimizer moments come from the
/// newest checkpoint, the one with the largest `(step, tokens)`.
pub fn sma_average(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Empty("cannot average zero checkpoints".into()))?;
    if let Some(c) = checkpoints
        .iter()
        .find(|c| c.meta.fingerprint != first.meta.fingerprint)
    {
        return Err(Error::Incompatible(format!(
            "config fingerprints differ: {:#018x} vs {:#018x}",
            first.meta.fingerprint, c.meta.fingerprint
        )));
    }
    let params = average_params(&checkpoints.iter().map(|c| &c.params).collect::<Vec<_>>())?;
    let newest = checkpoints
        .iter()
        .max_by_key(|c| (c.meta.step, c.meta.tokens))
        .expect("non-empty");
    let mut meta = newest.meta;
    meta.phase = Phase::Averaged;
    Ok(Checkpoint {
        params,
        optimizer: newest.optimizer.clone(),
        meta,
    })
}

/// The most recent `window` weight snapshots.
#[derive(Debug, Clone)]
pub struct SmaRing {
    window: usize,
    snapshots: VecDeque<ParamStore<f32>>,
}

impl SmaRing {
    pub fn new(window: usize) -> Self {
        SmaRing {
            window,
            snapshots: VecDeque::with_capacity(window),
        }
    }

    pub fn push(&mut self, params: ParamStore<f32>) {
        if self.snapshots.len() == self.window {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back(params);
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn average(&self) -> Result<ParamStore<f32>> {
        average_params(&self.snapshots.iter().collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_store(rng: &mut ChaCha8Rng) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert(
            "a",
            vec![3, 4],
            (0..12).map(|_| rng.random_range(-3.0f32..3.0)).collect(),
        );
        s.insert("b", vec![5], (0..5).map(|_| rng.random_range(-1e3f32..1e3)).collect());
        s
    }

    fn ckpt(params: ParamStore<f32>, step: u64) -> Checkpoint {
        let mut c = Checkpoint::new(&ModelConfig::toy(), params);
        c.meta.step = step;
        c.meta.tokens = step * 10;
        c
    }

    #[test]
    fn identical_inputs_average_to_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_store(&mut rng);
        let cks: Vec<_> = (0..6).map(|i| ckpt(p.clone(), i)).collect();
        assert_eq!(sma_average(&cks).unwrap().params, p);
    }

    #[test]
    fn opposite_inputs_cancel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_store(&mut rng);
        let mut q = p.clone();
        q.iter_mut().for_each(|(_, x)| x.data.iter_mut().for_each(|v| *v = -*v));
        let avg = sma_average(&[ckpt(p, 1), ckpt(q, 2)]).unwrap();
        assert!(avg.params.iter().all(|(_, x)| x.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn matches_brute_force_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stores: Vec<_> = (0..6).map(|_| random_store(&mut rng)).collect();
        let cks: Vec<_> = stores
            .iter()
            .enumerate()
            .map(|(i, s)| ckpt(s.clone(), i as u64))
            .collect();
        let avg = sma_average(&cks).unwrap();
        for (name, p) in avg.params.iter() {
            for (j, &got) in p.data.iter().enumerate() {
                let mut acc = 0.0f64;
                for s in &stores {
                    acc += f64::from(s.get(name).unwrap().data[j]);
                }
                let want = acc / 6.0;
                assert!(
                    (f64::from(got) - want).abs() <= 1e-7 * want.abs().max(1.0),
                    "{name}[{j}]"
                );
            }
        }
    }

    #[test]
    fn metadata_and_moments_from_newest() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cks: Vec<_> = (0..3).map(|i| ckpt(random_store(&mut rng), 10 - i)).collect();
        let mut st = crate::checkpoint::AdamState::zeros_like(&cks[0].params);
        st.step = 77;
        cks[0].optimizer = Some(st.clone());
        let avg = sma_average(&cks).unwrap();
        assert_eq!(avg.meta.step, 10);
        assert_eq!(avg.meta.tokens, 100);
        assert_eq!(avg.optimizer, Some(st));
    }

    #[test]
    fn mismatches_are_incompatible() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = ckpt(random_store(&mut rng), 1);
        let mut b = ckpt(random_store(&mut rng), 2);
        b.meta.fingerprint ^= 1;
        assert!(matches!(sma_average(&[a.clone(), b]), Err(Error::Incompatible(_))));
        let mut c = ckpt(random_store(&mut rng), 3);
        c.params.insert("extra", vec![1], vec![0.0]);
        assert!(matches!(sma_average(&[a, c]), Err(Error::Incompatible(_))));
        assert!(matches!(sma_average(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn ring_keeps_latest_window() {
        let mut ring = SmaRing::new(2);
        for v in [1.0f32, 2.0, 4.0] {
            let mut s = ParamStore::new();
            s.insert("x", vec![1], vec![v]);
            ring.push(s);
        }
        assert_eq!(ring.len(), 2);
        assert_eq!(ring.average().unwrap().get("x").unwrap().data[0], 3.0);
    }

    #[test]
    fn config_validation() {
        assert!(SmaConfig::new(0, 10).validate().is_err());
        assert!(SmaConfig::new(6, 0).validate().is_err());
        assert!(SmaConfig::new(6, 5).validate().is_err());
        SmaConfig::new(1, 1).validate().unwrap();
        assert_eq!(SmaConfig::new(6, 8_000).snapshot_spacing(), 1_333);
    }

    proptest! {
        #[test]
        fn permutation_invariant(seed in any::<u64>(), n in 1usize..7, rot in 0usize..7, swap in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cks: Vec<_> = (0..n).map(|i| ckpt(random_store(&mut rng), i as u64)).collect();
            let mut perm = cks.clone();
            perm.rotate_left(rot % n);
            if swap && n > 1 {
                perm.swap(0, n - 1);
            }
            prop_assert_eq!(sma_average(&cks).unwrap(), sma_average(&perm).unwrap());
        }

        #[test]
        fn window_one_is_identity(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = ckpt(random_store(&mut rng), 9);
            prop_assert_eq!(sma_average(std::slice::from_ref(&c)).unwrap().params, c.params);
        }
    }
}
