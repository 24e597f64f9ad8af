//! Connected components of scribble strokes and the contiguous shrink procedure.

use std::collections::{BTreeMap, VecDeque};

use crate::domain::{ScribbleAnnotation, BG, GC, UNLABELED};
use crate::error::{CoreError, Result};

/// 8-connected stroke of one class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub code: u8,
    /// Breadth-first order from the stroke end with the smaller raster index;
    /// for a simple path this is the path order.
    pub pixels: Vec<usize>,
    /// Topmost, then leftmost pixel.
    pub anchor: usize,
}

impl Component {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

fn neighbors(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (p / w, p % w);
    let rows = r.saturating_sub(1)..=(r + 1).min(h - 1);
    rows.flat_map(move |rr| (c.saturating_sub(1)..=(c + 1).min(w - 1)).map(move |cc| rr * w + cc))
        .filter(move |&q| q != p)
}

/// Breadth-first order over `member` pixels reachable from `root`.
fn bfs(root: usize, member: &[bool], h: usize, w: usize, seen: &mut [bool]) -> Vec<usize> {
    let mut order = vec![root];
    let mut queue = VecDeque::from([root]);
    seen[root] = true;
    while let Some(p) = queue.pop_front() {
        for q in neighbors(p, h, w) {
            if member[q] && !seen[q] {
                seen[q] = true;
                order.push(q);
                queue.push_back(q);
            }
        }
    }
    order
}

/// Components of `code`, ordered by anchor in raster order.
pub fn connected_components(scr: &ScribbleAnnotation, code: u8) -> Vec<Component> {
    let (h, w) = scr.dims();
    let member = scr.indicator(code);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for anchor in 0..h * w {
        if !member[anchor] || seen[anchor] {
            continue;
        }
        let sweep = bfs(anchor, &member, h, w, &mut seen);
        // two sweeps find a pair of far-apart ends
        let mut scratch = vec![false; h * w];
        let a = *bfs(*sweep.last().expect("nonempty"), &member, h, w, &mut scratch).last().expect("nonempty");
        let end_a = *sweep.last().expect("nonempty");
        let root = end_a.min(a);
        scratch.iter_mut().for_each(|s| *s = false);
        let pixels = bfs(root, &member, h, w, &mut scratch);
        out.push(Component { code, pixels, anchor });
    }
    out
}

/// Codes left alone by [`shrink_scribble`] unless listed explicitly.
pub fn default_shrink_classes(scr: &ScribbleAnnotation) -> Vec<u8> {
    let mut codes: Vec<u8> = scr
        .labels()
        .iter()
        .copied()
        .filter(|&l| l != UNLABELED && l != GC && l != BG)
        .collect();
    codes.sort_unstable();
    codes.dedup();
    codes
}

/// Removes `round(ratio * n)` pixels of each listed class. Whole components
/// go first, in anchor order, while the running total stays within the
/// target; the next component is trimmed from its far end so the survivors
/// stay one 8-connected piece.
pub fn shrink_scribble(scr: &ScribbleAnnotation, ratio: f64, classes: &[u8]) -> Result<ScribbleAnnotation> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(CoreError::Param(format!("shrink ratio {ratio} outside [0, 1]")));
    }
    let mut out = scr.clone();
    for &code in classes {
        let comps = connected_components(scr, code);
        let total: usize = comps.iter().map(Component::len).sum();
        let target = (ratio * total as f64).round() as usize;
        let mut removed = 0;
        for comp in &comps {
            if removed == target {
                break;
            }
            let take = comp.len().min(target - removed);
            for &p in comp.pixels.iter().rev().take(take) {
                out.labels_mut()[p] = UNLABELED;
            }
            removed += take;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassStats {
    pub pixels: usize,
    pub components: usize,
}

/// Pixel and component counts for every code except [`UNLABELED`].
pub fn scribble_stats(scr: &ScribbleAnnotation) -> BTreeMap<u8, ClassStats> {
    let mut stats: BTreeMap<u8, ClassStats> = BTreeMap::new();
    for &l in scr.labels() {
        if l != UNLABELED {
            stats.entry(l).or_default().pixels += 1;
        }
    }
    for (&code, s) in stats.iter_mut() {
        s.components = connected_components(scr, code).len();
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::LabelGrid;

    fn grid(rows: &[&str]) -> LabelGrid {
        let h = rows.len();
        let w = rows[0].len();
        let labels = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| if b == b'.' { UNLABELED } else { b - b'0' }))
            .collect();
        LabelGrid::new(h, w, labels).unwrap()
    }

    #[test]
    fn l_shape_and_diagonal_are_single_components() {
        let g = grid(&["1....", "1....", "111..", ".....", "...1.", "....1"]);
        let comps = connected_components(&g, 1);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].len(), 5);
        assert_eq!(comps[0].anchor, 0);
        assert_eq!(comps[1].len(), 2);
    }

    #[test]
    fn path_order_runs_between_the_ends() {
        let g = grid(&["..1111", ".1....", "1....."]);
        let c = &connected_components(&g, 1)[0];
        // ends are pixels 5 and 12; the root is the smaller one
        assert_eq!(c.pixels, vec![5, 4, 3, 2, 7, 12]);
    }

    #[test]
    fn shrink_trims_first_component_partially() {
        // sizes 6 and 4 in anchor order, ratio 0.5 -> 5 removed from the first
        let g = grid(&["111111.", ".......", ".1111.."]);
        let out = shrink_scribble(&g, 0.5, &[1]).unwrap();
        assert_eq!(out.count(1), 5);
        assert_eq!(&out.labels()[..6], &[1, UNLABELED, UNLABELED, UNLABELED, UNLABELED, UNLABELED]);
        assert_eq!(&out.labels()[15..19], &[1, 1, 1, 1]);
    }

    #[test]
    fn zero_ratio_is_identity_and_bad_ratio_rejected() {
        let g = grid(&["11.", ".22"]);
        assert_eq!(shrink_scribble(&g, 0.0, &[1, 2]).unwrap(), g);
        assert!(shrink_scribble(&g, 1.5, &[1]).is_err());
        assert!(shrink_scribble(&g, -0.1, &[1]).is_err());
    }

    #[test]
    fn stats_count_pixels_and_components() {
        assert!(scribble_stats(&LabelGrid::filled(4, 4, UNLABELED)).is_empty());
        let g = grid(&["11.2", "...2", "1..."]);
        let s = scribble_stats(&g);
        assert_eq!(s[&1], ClassStats { pixels: 3, components: 2 });
        assert_eq!(s[&2], ClassStats { pixels: 2, components: 1 });
    }
}
