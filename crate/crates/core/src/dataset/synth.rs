use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, SpecimenRecord, Split};
use crate::losses::RANKS;

/// Parameters of a synthetic taxonomy with per-specimen features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Children per node at each rank, order first.
    pub branching: Vec<usize>,
    pub specimens_per_species: usize,
    pub d_in: usize,
    pub noise_sigma: f64,
    pub unseen_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            branching: vec![5, 4, 3, 3],
            specimens_per_species: 20,
            d_in: 32,
            noise_sigma: 0.04,
            unseen_fraction: 0.2,
            seed: 0,
        }
    }
}

// Prototype offset norm per rank; deeper ranks move less.
const RANK_SCALE: [f64; RANKS] = [1.0, 0.6, 0.4, 0.3];

const SYLLABLES: [&str; 16] = [
    "ba", "ce", "di", "fo", "gu", "la", "me", "ni", "po", "ru", "sa", "te", "vi", "xo", "za", "lu",
];

fn stem(mut index: usize) -> String {
    let mut parts = Vec::new();
    loop {
        parts.push(SYLLABLES[index % SYLLABLES.len()]);
        index /= SYLLABLES.len();
        if index == 0 {
            break;
        }
    }
    if parts.len() < 2 {
        parts.push("ro");
    }
    parts.concat()
}

fn capitalized(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn rank_name(rank: usize, index: usize, genus: &str) -> String {
    let s = stem(index);
    match rank {
        0 => capitalized(&format!("{s}ptera")),
        1 => capitalized(&format!("{s}idae")),
        2 => capitalized(&format!("{s}us")),
        _ => format!("{genus} {s}i"),
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.branching.len() != RANKS {
            return bad("branching needs one entry per rank (4)");
        }
        if self.branching.contains(&0) {
            return bad("branching entries must be positive");
        }
        if self.specimens_per_species == 0 {
            return bad("specimens_per_species must be positive");
        }
        if self.d_in == 0 {
            return bad("d_in must be positive");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.unseen_fraction) {
            return bad("unseen_fraction must be in [0, 1)");
        }
        Ok(())
    }

    pub fn species_count(&self) -> usize {
        self.branching.iter().product()
    }
}

struct Node {
    parent: Option<usize>,
    name: String,
    proto: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Builds a synthetic dataset. Output depends only on `spec`.
///
/// Each tree node's prototype is its parent's plus a Gaussian offset whose
/// norm is about the rank's scale. A specimen's feature for a modality is
/// `M (species prototype + noise)` with a fixed random `M` per modality.
/// Unseen species occur only in `test_unseen` and `key`; every order keeps
/// at least one seen species.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let d = spec.d_in;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut levels: Vec<Vec<Node>> = Vec::with_capacity(RANKS);
    for r in 0..RANKS {
        let std = RANK_SCALE[r] / (d as f64).sqrt();
        let parents: Vec<Option<usize>> = if r == 0 {
            vec![None]
        } else {
            (0..levels[r - 1].len()).map(Some).collect()
        };
        let mut nodes = Vec::new();
        for p in parents {
            for _ in 0..spec.branching[r] {
                let base = p.map_or_else(|| vec![0.0; d], |p| levels[r - 1][p].proto.clone());
                let offset = gaussian(&mut rng, d, std);
                let genus = p.map_or("", |p| levels[r - 1][p].name.as_str());
                let name = rank_name(r, nodes.len(), genus);
                nodes.push(Node {
                    parent: p,
                    name,
                    proto: base.iter().zip(&offset).map(|(a, b)| a + b).collect(),
                });
            }
        }
        levels.push(nodes);
    }

    let mixing: Vec<Vec<f64>> = (0..2)
        .map(|_| gaussian(&mut rng, d * d, 1.0 / (d as f64).sqrt()))
        .collect();

    let species = &levels[RANKS - 1];
    let ancestors = |s: usize| -> [usize; RANKS] {
        let mut path = [0; RANKS];
        let mut cur = s;
        for r in (0..RANKS).rev() {
            path[r] = cur;
            if r > 0 {
                cur = levels[r]
                    .get(cur)
                    .and_then(|n| n.parent)
                    .expect("non-root nodes have parents");
            }
        }
        path
    };

    let n_unseen = (spec.unseen_fraction * species.len() as f64).floor() as usize;
    let mut candidates: Vec<usize> = (0..species.len()).collect();
    candidates.shuffle(&mut rng);
    let mut seen_per_order = vec![0usize; levels[0].len()];
    for s in 0..species.len() {
        seen_per_order[ancestors(s)[0]] += 1;
    }
    let mut unseen = vec![false; species.len()];
    let mut picked = 0;
    for s in candidates {
        if picked == n_unseen {
            break;
        }
        let o = ancestors(s)[0];
        if seen_per_order[o] > 1 {
            seen_per_order[o] -= 1;
            unseen[s] = true;
            picked += 1;
        }
    }
    if picked < n_unseen {
        return Err(DataError::InvalidSpec(format!(
            "cannot hold out {n_unseen} species while keeping every order seen"
        )));
    }

    let n = spec.specimens_per_species;
    let mut records = Vec::with_capacity(species.len() * n);
    for s in 0..species.len() {
        let path = ancestors(s);
        let labels: [Option<String>; RANKS] = std::array::from_fn(|r| Some(levels[r][path[r]].name.clone()));
        let splits = split_plan(n, unseen[s]);
        for split in splits {
            let mut feats = Vec::with_capacity(2);
            for m in &mixing {
                let noisy: Vec<f64> = species[s]
                    .proto
                    .iter()
                    .zip(gaussian(&mut rng, d, spec.noise_sigma))
                    .map(|(p, e)| p + e)
                    .collect();
                feats.push(
                    (0..d)
                        .map(|i| (0..d).map(|j| m[i * d + j] * noisy[j]).sum::<f64>())
                        .collect::<Vec<f64>>(),
                );
            }
            let dna_feat = feats.pop().expect("two modalities");
            let img_feat = feats.pop().expect("two modalities");
            records.push(SpecimenRecord {
                id: format!("S{:06}", records.len()),
                split,
                labels: labels.clone(),
                img_feat,
                dna_feat,
            });
        }
    }
    Dataset::from_records(records)
}

/// Split of each of a species' `n` specimens.
///
/// Seen species: about 20% test, 10% validation, the rest (at least one)
/// training. Unseen species: half the specimens (rounded down) go to the key
/// split, the rest to test_unseen.
fn split_plan(n: usize, unseen: bool) -> Vec<Split> {
    let mut out = Vec::with_capacity(n);
    if unseen {
        let key = n / 2;
        out.extend(std::iter::repeat_n(Split::Key, key));
        out.extend(std::iter::repeat_n(Split::TestUnseen, n - key));
        return out;
    }
    let round = |x: f64| x.round() as usize;
    let test = round(0.2 * n as f64).max(1).min(n - 1);
    let val = round(0.1 * n as f64).min(n - 1 - test);
    out.extend(std::iter::repeat_n(Split::TrainSeen, n - test - val));
    out.extend(std::iter::repeat_n(Split::Val, val));
    out.extend(std::iter::repeat_n(Split::TestSeen, test));
    out
}
