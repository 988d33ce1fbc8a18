use std::collections::BTreeMap;

use super::{color_histogram, rounded_mean, QuantMode, QuantizedImage, MAX_COLORS};
use crate::error::{Error, Result};
use crate::io::Image;

const DEPTH: usize = 8;

#[derive(Clone)]
struct Node {
    pixels: u64,
    sums: Vec<u64>,
    /// Distinct-color ids merged into this node.
    members: Vec<usize>,
}

/// Path code with bit `7 − level` of every channel interleaved, channel 0 first.
fn path_code(color: &[u8]) -> u64 {
    let mut code = 0u64;
    for level in 0..DEPTH {
        for &v in color {
            code = code << 1 | ((v >> (DEPTH - 1 - level)) & 1) as u64;
        }
    }
    code
}

/// Octree color quantization in joint color space.
///
/// Every distinct color starts as a depth-8 leaf. While more than `k` leaves
/// remain, the parents of the deepest leaves are collapsed, fewest pixels
/// first with ties in path order.
pub fn octree_quantize(image: &Image, k: usize) -> Result<QuantizedImage> {
    let channels = image.channels;
    if k == 0 || k > MAX_COLORS {
        return Err(Error::Parameter(format!("K must be in 1..=256, got {k}")));
    }
    if channels == 0 || channels > 8 {
        return Err(Error::dim(format!("octree supports 1..=8 channels, got {channels}")));
    }
    let p = image.pixels();
    let colors: Vec<Vec<u8>> = (0..p).map(|i| image.color(i)).collect();
    let (distinct, counts, slot) = color_histogram(&colors);

    // Leaves keyed by (depth, prefix).
    let mut leaves: BTreeMap<(usize, u64), Node> = BTreeMap::new();
    let codes: Vec<u64> = distinct.iter().map(|c| path_code(c)).collect();
    for (d, color) in distinct.iter().enumerate() {
        leaves.insert(
            (DEPTH, codes[d]),
            Node {
                pixels: counts[d],
                sums: color.iter().map(|&v| v as u64 * counts[d]).collect(),
                members: vec![d],
            },
        );
    }

    let mut depth = DEPTH;
    while leaves.len() > k && depth > 0 {
        let mut parents: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for &(d, pre) in leaves.keys() {
            if d == depth {
                parents.entry(pre >> channels).or_default().push(pre);
            }
        }
        let mut order: Vec<(u64, u64)> = parents
            .iter()
            .map(|(&parent, kids)| (kids.iter().map(|&c| leaves[&(depth, c)].pixels).sum(), parent))
            .collect();
        order.sort();
        for (_, parent) in order {
            if leaves.len() <= k {
                break;
            }
            let mut merged = Node {
                pixels: 0,
                sums: vec![0; channels],
                members: Vec::new(),
            };
            for child in &parents[&parent] {
                let node = leaves.remove(&(depth, *child)).expect("child is a current leaf");
                merged.pixels += node.pixels;
                merged.sums.iter_mut().zip(&node.sums).for_each(|(a, b)| *a += b);
                merged.members.extend(node.members);
            }
            leaves.insert((depth - 1, parent), merged);
        }
        depth -= 1;
    }

    // Palette order follows the leaves' position along the path code.
    let mut ordered: Vec<((u64, usize), Node)> = leaves
        .into_iter()
        .map(|((d, pre), node)| {
            let shift = (DEPTH - d) * channels;
            let aligned = if shift >= 64 { 0 } else { pre << shift };
            ((aligned, d), node)
        })
        .collect();
    ordered.sort_by_key(|(key, _)| *key);

    let mut owner = vec![0u8; distinct.len()];
    let mut palette = Vec::with_capacity(k * channels);
    for (b, (_, node)) in ordered.iter().enumerate() {
        for &m in &node.members {
            owner[m] = b as u8;
        }
        palette.extend(node.sums.iter().map(|&s| rounded_mean(s, node.pixels)));
    }
    if palette.is_empty() {
        palette.resize(channels, 0);
    }
    let fill = palette[..channels].to_vec();
    while palette.len() < k * channels {
        palette.extend_from_slice(&fill);
    }
    let indices = slot.iter().map(|&s| owner[s]).collect();
    QuantizedImage::new(QuantMode::Joint, channels, image.height, image.width, k, palette, indices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::{quantization_mse, unique_colors};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_image(seed: u64, levels: u8) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let step = 255 / (levels.max(2) - 1);
        Image::new(3, 8, 8, (0..192).map(|_| rng.gen_range(0..levels) * step).collect()).unwrap()
    }

    #[test]
    fn path_code_interleaves_msb_first() {
        assert_eq!(path_code(&[0x80, 0, 0]) >> 21, 0b100);
        assert_eq!(path_code(&[0, 0, 1]), 1);
        assert_eq!(path_code(&[0xff, 0xff, 0xff]), (1 << 24) - 1);
    }

    #[test]
    fn k1_is_global_mean() {
        let im = Image::new(3, 1, 3, vec![0, 10, 21, 5, 5, 5, 255, 0, 0]).unwrap();
        let q = octree_quantize(&im, 1).unwrap();
        assert_eq!(q.palette, vec![10, 5, 85]);
    }

    #[test]
    fn two_clusters_get_two_buckets() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let centers = [[30u8, 200, 40], [220, 20, 180]];
        let p = 64;
        let mut data = vec![0u8; 3 * p];
        let mut labels = Vec::new();
        for i in 0..p {
            let l = i % 2;
            labels.push(l);
            for c in 0..3 {
                data[c * p + i] = centers[l][c].wrapping_add(rng.gen_range(0..4));
            }
        }
        let im = Image::new(3, 8, 8, data).unwrap();
        let q = octree_quantize(&im, 2).unwrap();
        // Each pixel's bucket color must be its nearest bucket, and buckets split the clusters.
        for i in 0..p {
            assert_eq!(q.indices[i], q.indices[labels[i]]);
            let color = im.color(i);
            let dist = |b: usize| -> i64 {
                (0..3).map(|c| (color[c] as i64 - q.palette_value(c, b) as i64).pow(2)).sum()
            };
            assert!(dist(q.indices[i] as usize) <= dist(1 - q.indices[i] as usize));
        }
        assert_ne!(q.indices[0], q.indices[1]);
    }

    proptest! {
        #[test]
        fn lossless_with_enough_slots(seed in 0u64..1000, levels in 2u8..4) {
            let im = random_image(seed, levels);
            let k = unique_colors(&im).min(256);
            let q = octree_quantize(&im, k).unwrap();
            prop_assert_eq!(quantization_mse(&im, &q.reconstruct()).unwrap(), 0.0);
        }

        #[test]
        fn at_most_k_colors_and_deterministic(seed in 0u64..1000, k in 1usize..=40) {
            let im = random_image(seed, 255);
            let q = octree_quantize(&im, k).unwrap();
            prop_assert!(unique_colors(&q.reconstruct()) <= k);
            prop_assert_eq!(q, octree_quantize(&im, k).unwrap());
        }
    }
}
