//! Two-pass connected-component labeling of 2D binary slices (union-find).

use alloc::{vec, vec::Vec};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = alloc::string::String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(alloc::format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let p = parent[i as usize];
        parent[i as usize] = parent[p as usize];
        i = p;
    }
    i
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        // smaller provisional label wins so roots stay in scan order
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Labels foreground pixels of a `width x height` row-major slice.
/// Returns per-pixel labels (0 = background, components numbered from 1 in
/// order of their first pixel in raster scan) and the component sizes
/// (index 0 unused).
pub fn label(
    fg: &[bool],
    width: usize,
    height: usize,
    conn: Connectivity,
) -> (Vec<u32>, Vec<usize>) {
    assert_eq!(fg.len(), width * height);
    let mut provisional = vec![0u32; fg.len()];
    let mut parent: Vec<u32> = vec![0];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !fg[i] {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut k = 0;
            let mut push = |nx: isize, ny: isize| {
                if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
                    let l = provisional[ny as usize * width + nx as usize];
                    if l != 0 {
                        neighbours[k] = l;
                        k += 1;
                    }
                }
            };
            let (xi, yi) = (x as isize, y as isize);
            push(xi - 1, yi);
            push(xi, yi - 1);
            if conn == Connectivity::Eight {
                push(xi - 1, yi - 1);
                push(xi + 1, yi - 1);
            }
            if k == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                provisional[i] = l;
            } else {
                let min = *neighbours[..k].iter().min().expect("k > 0");
                provisional[i] = min;
                for &n in &neighbours[..k] {
                    union(&mut parent, min, n);
                }
            }
        }
    }
    let mut final_label = vec![0u32; parent.len()];
    let mut sizes = vec![0usize];
    for i in 0..provisional.len() {
        let p = provisional[i];
        if p == 0 {
            continue;
        }
        let root = find(&mut parent, p) as usize;
        if final_label[root] == 0 {
            sizes.push(0);
            final_label[root] = (sizes.len() - 1) as u32;
        }
        let l = final_label[root];
        provisional[i] = l;
        sizes[l as usize] += 1;
    }
    (provisional, sizes)
}

/// Keep-mask of the largest component; ties go to the component met first
/// in raster order. All false when the slice has no foreground.
pub fn largest_component(
    fg: &[bool],
    width: usize,
    height: usize,
    conn: Connectivity,
) -> Vec<bool> {
    let (labels, sizes) = label(fg, width, height, conn);
    let mut best = 0usize;
    for (l, &s) in sizes.iter().enumerate().skip(1) {
        if s > sizes[best] {
            best = l;
        }
    }
    if best == 0 {
        return vec![false; fg.len()];
    }
    labels.iter().map(|&l| l as usize == best).collect()
}
