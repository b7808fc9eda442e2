//! Enumeration of Cutout cut sets and CutMix subsets.
//!
//! Both augmentations act on patch positions only, so every expectation the
//! trainers need reduces to a finite sum over subsets of `[P]`.

/// A subset of patch positions, stored as a bitmask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchMask(u32);

/// Largest patch count for which subsets are enumerated.
pub const MAX_PATCHES: usize = 20;

impl PatchMask {
    pub fn from_bits(bits: u32) -> Self {
        PatchMask(bits)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn contains(self, patch: usize) -> bool {
        self.0 >> patch & 1 == 1
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn complement(self, num_patches: usize) -> Self {
        PatchMask(!self.0 & full_bits(num_patches))
    }

    pub fn iter(self, num_patches: usize) -> impl Iterator<Item = usize> {
        (0..num_patches).filter(move |&p| self.contains(p))
    }
}

fn full_bits(num_patches: usize) -> u32 {
    if num_patches >= 32 {
        u32::MAX
    } else {
        (1u32 << num_patches) - 1
    }
}

/// Binomial coefficient as a float; exact for the small arguments used here.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc.round()
}

/// All cut sets of size `cut`, in increasing bitmask order.
pub fn cut_sets(num_patches: usize, cut: usize) -> Vec<PatchMask> {
    assert!(num_patches <= MAX_PATCHES, "too many patches to enumerate");
    (0..=full_bits(num_patches))
        .map(PatchMask)
        .filter(|m| m.len() == cut)
        .collect()
}

/// One CutMix subset with its probability under the two-stage sampler:
/// cardinality uniform on `0..=P`, then a uniform subset of that size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixSubset {
    pub mask: PatchMask,
    pub prob: f64,
    /// Label weight `|S|/P` of the first sample in a pair.
    pub ratio: f64,
}

/// Every subset of `[P]` with its CutMix probability, in increasing bitmask order.
pub fn cutmix_subsets(num_patches: usize) -> Vec<MixSubset> {
    assert!(num_patches <= MAX_PATCHES, "too many patches to enumerate");
    let p = num_patches as f64;
    (0..=full_bits(num_patches))
        .map(|bits| {
            let mask = PatchMask(bits);
            let size = mask.len();
            MixSubset {
                mask,
                prob: 1.0 / ((p + 1.0) * binomial(num_patches, size)),
                ratio: size as f64 / p,
            }
        })
        .collect()
}

/// `E_S[g(|S|)]` where `|S|` is uniform on `0..=P`.
pub fn mean_over_sizes(num_patches: usize, g: impl Fn(usize) -> f64) -> f64 {
    (0..=num_patches).map(g).sum::<f64>() / (num_patches as f64 + 1.0)
}
