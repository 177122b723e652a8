use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DatasetRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|v| !(*v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {r:?} must be >= 0 and sum to 1")));
        }
        Ok(())
    }

    /// Split sizes for `n` items by largest remainder.
    fn sizes(&self, n: usize) -> [usize; 3] {
        let r = [self.train, self.val, self.test];
        let exact: Vec<f64> = r.iter().map(|v| v * n as f64).collect();
        let mut sizes = [0usize; 3];
        for k in 0..3 {
            sizes[k] = (exact[k] + 1e-9).floor() as usize;
        }
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = exact[a] - sizes[a] as f64;
            let fb = exact[b] - sizes[b] as f64;
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let mut left = n - sizes.iter().sum::<usize>();
        for k in order.iter().cycle() {
            if left == 0 {
                break;
            }
            sizes[*k] += 1;
            left -= 1;
        }
        sizes
    }
}

/// Seeded shuffle and contiguous split of `0..n`, stratified by `class_of`
/// when every group can give at least one item to each nonempty split.
pub fn split_indices(classes: &[Option<usize>], ratios: SplitRatios, seed: u64) -> Result<[Vec<usize>; 3]> {
    ratios.validate()?;
    let n = classes.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, c) in classes.iter().enumerate() {
        groups.entry(*c).or_default().push(i);
    }
    let wanted = [ratios.train > 0.0, ratios.val > 0.0, ratios.test > 0.0];
    let stratify = groups.len() > 1
        && groups.values().all(|g| {
            let s = ratios.sizes(g.len());
            (0..3).all(|k| !wanted[k] || s[k] >= 1)
        });
    let mut out: [Vec<usize>; 3] = Default::default();
    let mut take = |items: &mut Vec<usize>, rng: &mut ChaCha8Rng| {
        items.shuffle(rng);
        let s = ratios.sizes(items.len());
        out[0].extend_from_slice(&items[..s[0]]);
        out[1].extend_from_slice(&items[s[0]..s[0] + s[1]]);
        out[2].extend_from_slice(&items[s[0] + s[1]..]);
    };
    if stratify {
        for g in groups.values_mut() {
            take(g, &mut rng);
        }
    } else {
        take(&mut (0..n).collect(), &mut rng);
    }
    Ok(out)
}

/// Splits records into (train, val, test).
pub fn split_dataset(
    records: &[DatasetRecord],
    ratios: SplitRatios,
    seed: u64,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    let classes: Vec<Option<usize>> = records.iter().map(DatasetRecord::primary_class).collect();
    let [a, b, c] = split_indices(&classes, ratios, seed)?;
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| records[i].clone()).collect();
    Ok((pick(a), pick(b), pick(c)))
}
