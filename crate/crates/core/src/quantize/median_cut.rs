use super::{color_histogram, rounded_mean, QuantMode, QuantizedImage, MAX_COLORS};
use crate::error::{Error, Result};
use crate::io::Image;

struct Box {
    /// Indices into the distinct-color table.
    members: Vec<usize>,
    pixels: u64,
}

/// Splits boxes of distinct points until `k` boxes exist or none can be split.
/// Returns, for each distinct point, its box id, plus the box count.
fn split_boxes(points: &[Vec<u8>], counts: &[u64], k: usize) -> (Vec<usize>, usize) {
    let dims = points.first().map_or(0, Vec::len);
    let mut boxes = vec![Box {
        members: (0..points.len()).collect(),
        pixels: counts.iter().sum(),
    }];
    let range = |b: &Box, axis: usize| {
        let (lo, hi) = b.members.iter().fold((u8::MAX, u8::MIN), |(lo, hi), &m| {
            (lo.min(points[m][axis]), hi.max(points[m][axis]))
        });
        hi - lo
    };
    while boxes.len() < k {
        let mut target: Option<usize> = None;
        for (i, b) in boxes.iter().enumerate() {
            if b.members.len() > 1 && target.map_or(true, |t| b.pixels > boxes[t].pixels) {
                target = Some(i);
            }
        }
        let Some(i) = target else { break };
        let mut axis = 0;
        let mut best = 0;
        for a in 0..dims {
            let r = range(&boxes[i], a);
            if r > best {
                best = r;
                axis = a;
            }
        }
        let mut members = std::mem::take(&mut boxes[i].members);
        members.sort_by(|&x, &y| points[x][axis].cmp(&points[y][axis]).then(points[x].cmp(&points[y])));
        let total = boxes[i].pixels;
        // Candidate cuts sit between runs of equal axis values.
        let mut cut = 0;
        let mut best_gap = u64::MAX;
        let mut left = 0u64;
        for pos in 0..members.len() - 1 {
            left += counts[members[pos]];
            if points[members[pos]][axis] == points[members[pos + 1]][axis] {
                continue;
            }
            let gap = (2 * left).abs_diff(total);
            if gap < best_gap {
                best_gap = gap;
                cut = pos + 1;
            }
        }
        let right = members.split_off(cut);
        let left_pixels = members.iter().map(|&m| counts[m]).sum();
        boxes[i] = Box {
            members,
            pixels: left_pixels,
        };
        boxes.push(Box {
            pixels: total - left_pixels,
            members: right,
        });
    }
    let mut owner = vec![0; points.len()];
    for (b, bx) in boxes.iter().enumerate() {
        for &m in &bx.members {
            owner[m] = b;
        }
    }
    (owner, boxes.len())
}

/// Box color as the rounded mean of member pixels.
fn box_colors(points: &[Vec<u8>], counts: &[u64], owner: &[usize], boxes: usize) -> Vec<Vec<u8>> {
    let dims = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0u64; dims]; boxes];
    let mut n = vec![0u64; boxes];
    for (p, point) in points.iter().enumerate() {
        n[owner[p]] += counts[p];
        for a in 0..dims {
            sums[owner[p]][a] += point[a] as u64 * counts[p];
        }
    }
    sums.iter()
        .zip(&n)
        .map(|(s, &c)| s.iter().map(|&v| rounded_mean(v, c)).collect())
        .collect()
}

/// Quantizes `colors` (one tuple per pixel) to at most `k` representatives.
fn quantize_points(colors: &[Vec<u8>], k: usize) -> (Vec<Vec<u8>>, Vec<u8>) {
    let (distinct, counts, slot) = color_histogram(colors);
    let (owner, boxes) = split_boxes(&distinct, &counts, k);
    let mut palette = box_colors(&distinct, &counts, &owner, boxes);
    let fill = palette[0].clone();
    palette.resize(k, fill);
    let indices = slot.iter().map(|&s| owner[s] as u8).collect();
    (palette, indices)
}

/// Median Cut color quantization.
///
/// Joint mode cuts boxes in the full color space; per-channel mode runs the
/// one-dimensional algorithm on each channel plane independently.
pub fn median_cut(image: &Image, k: usize, mode: QuantMode) -> Result<QuantizedImage> {
    let p = image.pixels();
    if k == 0 || k > MAX_COLORS {
        return Err(Error::Parameter(format!("K must be in 1..=256, got {k}")));
    }
    if k > p {
        return Err(Error::Parameter(format!("K={k} exceeds the {p} pixels of the image")));
    }
    let (palette, indices) = match mode {
        QuantMode::Joint => {
            let colors: Vec<Vec<u8>> = (0..p).map(|i| image.color(i)).collect();
            let (pal, idx) = quantize_points(&colors, k);
            (pal.concat(), idx)
        }
        QuantMode::PerChannel => {
            let mut palette = Vec::with_capacity(image.channels * k);
            let mut indices = Vec::with_capacity(image.channels * p);
            for c in 0..image.channels {
                let values: Vec<Vec<u8>> = image.plane(c).iter().map(|&v| vec![v]).collect();
                let (pal, idx) = quantize_points(&values, k);
                palette.extend(pal.into_iter().map(|v| v[0]));
                indices.extend(idx);
            }
            (palette, indices)
        }
    };
    QuantizedImage::new(mode, image.channels, image.height, image.width, k, palette, indices)
}
