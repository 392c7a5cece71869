//! Non-overlapping `p×p` element decomposition of `[H, W, C]` fields.
//!
//! Elements are numbered row-major over the element grid and pixels inside an
//! element are row-major as well, so element `e` at element-grid position
//! `(r, c)` holds field rows `r·p..(r+1)·p` and columns `c·p..(c+1)·p`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    North,
    South,
    East,
    West,
}

impl Side {
    /// Assembly order.
    pub const ALL: [Side; 4] = [Side::North, Side::South, Side::East, Side::West];

    pub fn opposite(self) -> Side {
        match self {
            Side::North => Side::South,
            Side::South => Side::North,
            Side::East => Side::West,
            Side::West => Side::East,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoundaryCondition {
    Dirichlet,
    Neumann,
    Periodic,
}

impl BoundaryCondition {
    pub const ALL: [BoundaryCondition; 3] = [
        BoundaryCondition::Neumann,
        BoundaryCondition::Dirichlet,
        BoundaryCondition::Periodic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BoundaryCondition::Dirichlet => "dirichlet",
            BoundaryCondition::Neumann => "neumann",
            BoundaryCondition::Periodic => "periodic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Neighbor {
    Interior(usize),
    Boundary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaceSpec {
    pub element: usize,
    pub side: Side,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ElementPartition {
    p: usize,
    rows: usize,
    cols: usize,
    height: usize,
    width: usize,
}

impl ElementPartition {
    pub fn new(height: usize, width: usize, p: usize) -> Result<Self> {
        if p == 0 || height == 0 || width == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
            return Err(Error::contract(format!(
                "element size p={p} must divide H={height} and W={width}"
            )));
        }
        Ok(Self {
            p,
            rows: height / p,
            cols: width / p,
            height,
            width,
        })
    }

    pub fn element_size(&self) -> usize {
        self.p
    }

    /// Element counts along (y, x).
    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn pixels_per_element(&self) -> usize {
        self.p * self.p
    }

    pub fn element_at(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn coords(&self, e: usize) -> (usize, usize) {
        (e / self.cols, e % self.cols)
    }

    pub fn neighbor(&self, e: usize, side: Side, bc: BoundaryCondition) -> Neighbor {
        let (r, c) = self.coords(e);
        let (rows, cols) = (self.rows as isize, self.cols as isize);
        let (dr, dc) = match side {
            Side::North => (-1, 0),
            Side::South => (1, 0),
            Side::East => (0, 1),
            Side::West => (0, -1),
        };
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        let inside = (0..rows).contains(&nr) && (0..cols).contains(&nc);
        if inside {
            Neighbor::Interior(self.element_at(nr as usize, nc as usize))
        } else if bc == BoundaryCondition::Periodic {
            Neighbor::Interior(self.element_at(nr.rem_euclid(rows) as usize, nc.rem_euclid(cols) as usize))
        } else {
            Neighbor::Boundary
        }
    }

    pub fn neighbor_map(&self, bc: BoundaryCondition) -> NeighborMap {
        let entries = (0..self.count())
            .map(|e| Side::ALL.map(|s| self.neighbor(e, s, bc)))
            .collect();
        NeighborMap { entries, bc }
    }

    /// Local (row-major, within-element) pixel indices of the one-pixel strip
    /// adjacent to `side`, ordered along the face.
    pub fn face_pixels(&self, side: Side) -> Vec<usize> {
        let p = self.p;
        match side {
            Side::North => (0..p).collect(),
            Side::South => (0..p).map(|j| (p - 1) * p + j).collect(),
            Side::West => (0..p).map(|i| i * p).collect(),
            Side::East => (0..p).map(|i| i * p + p - 1).collect(),
        }
    }

    /// Flat field index of local pixel `i` in element `e`.
    pub fn field_pixel(&self, e: usize, i: usize) -> usize {
        let (r, c) = self.coords(e);
        let (y, x) = (r * self.p + i / self.p, c * self.p + i % self.p);
        y * self.width + x
    }

    /// Gather map taking a flat `[H, W, C]` field to `[E, p², C]`.
    pub fn partition_index(&self, channels: usize) -> Arc<[usize]> {
        let n = self.pixels_per_element();
        let mut idx = Vec::with_capacity(self.count() * n * channels);
        for e in 0..self.count() {
            for i in 0..n {
                let px = self.field_pixel(e, i);
                idx.extend((0..channels).map(|ch| px * channels + ch));
            }
        }
        idx.into()
    }

    /// Gather map taking `[E, p², C]` back to a flat `[H, W, C]` field.
    pub fn unpartition_index(&self, channels: usize) -> Arc<[usize]> {
        let n = self.pixels_per_element();
        let mut idx = vec![0; self.height * self.width * channels];
        for e in 0..self.count() {
            for i in 0..n {
                let px = self.field_pixel(e, i);
                for ch in 0..channels {
                    idx[px * channels + ch] = (e * n + i) * channels + ch;
                }
            }
        }
        idx.into()
    }

    /// Gather map taking `[E, p², C]` to the `[E, p, C]` strips of `side`.
    pub fn strip_index(&self, side: Side, channels: usize) -> Arc<[usize]> {
        let n = self.pixels_per_element();
        let face = self.face_pixels(side);
        let mut idx = Vec::with_capacity(self.count() * face.len() * channels);
        for e in 0..self.count() {
            for &i in &face {
                idx.extend((0..channels).map(|ch| (e * n + i) * channels + ch));
            }
        }
        idx.into()
    }

    pub fn partition(&self, field: &Tensor) -> Result<Tensor> {
        let c = self.check_field(field)?;
        let idx = self.partition_index(c);
        let data = idx.iter().map(|&i| field.data()[i]).collect();
        Tensor::new([self.count(), self.pixels_per_element(), c], data)
    }

    pub fn unpartition(&self, elements: &Tensor) -> Result<Tensor> {
        let s = elements.shape();
        if s.len() != 3 || s[0] != self.count() || s[1] != self.pixels_per_element() {
            return Err(Error::contract(format!(
                "elements {s:?} inconsistent with {} elements of {} pixels",
                self.count(),
                self.pixels_per_element()
            )));
        }
        let c = s[2];
        let idx = self.unpartition_index(c);
        let data = idx.iter().map(|&i| elements.data()[i]).collect();
        Tensor::new([self.height, self.width, c], data)
    }

    /// The `[p, C]` strip of `face` from partitioned `elements`.
    pub fn face_samples(&self, elements: &Tensor, face: FaceSpec) -> Result<Tensor> {
        let s = elements.shape();
        if face.element >= self.count() {
            return Err(Error::contract(format!(
                "element {} out of range ({} elements)",
                face.element,
                self.count()
            )));
        }
        if s.len() != 3 || s[0] != self.count() || s[1] != self.pixels_per_element() {
            return Err(Error::contract(format!("elements {s:?} do not match partition")));
        }
        let c = s[2];
        let n = self.pixels_per_element();
        let mut data = Vec::with_capacity(self.p * c);
        for i in self.face_pixels(face.side) {
            let base = (face.element * n + i) * c;
            data.extend_from_slice(&elements.data()[base..base + c]);
        }
        Tensor::new([self.p, c], data)
    }

    fn check_field(&self, field: &Tensor) -> Result<usize> {
        match field.shape() {
            &[h, w, c] if h == self.height && w == self.width => Ok(c),
            s => Err(Error::contract(format!(
                "field {s:?} does not match H={}, W={}, p={}",
                self.height, self.width, self.p
            ))),
        }
    }
}

/// Neighbour of every `(element, side)` under one boundary condition.
#[derive(Clone, Debug)]
pub struct NeighborMap {
    entries: Vec<[Neighbor; 4]>,
    bc: BoundaryCondition,
}

impl NeighborMap {
    pub fn get(&self, e: usize, side: Side) -> Neighbor {
        self.entries[e][side.index()]
    }

    pub fn bc(&self) -> BoundaryCondition {
        self.bc
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Tensor {
        Tensor::new([h, w, c], (0..h * w * c).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn single_element() {
        let part = ElementPartition::new(8, 8, 8).unwrap();
        let f = ramp(8, 8, 1);
        let e = part.partition(&f).unwrap();
        assert_eq!(e.shape(), &[1, 64, 1]);
        assert_eq!(e.data(), f.data());
    }

    #[test]
    fn element_zero_of_4x4() {
        let part = ElementPartition::new(4, 4, 2).unwrap();
        let e = part.partition(&ramp(4, 4, 1)).unwrap();
        assert_eq!(&e.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&e.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn non_divisible_extents_rejected() {
        let err = ElementPartition::new(10, 8, 4).unwrap_err().to_string();
        assert!(err.contains("H=10") && err.contains("p=4"), "{err}");
    }

    #[test]
    fn zero_elements_unpartition_to_zero_field() {
        let part = ElementPartition::new(4, 6, 2).unwrap();
        let f = part.unpartition(&Tensor::zeros([6, 4, 3])).unwrap();
        assert_eq!(f.shape(), &[4, 6, 3]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unpartition_rejects_wrong_count() {
        let part = ElementPartition::new(4, 4, 2).unwrap();
        assert!(part.unpartition(&Tensor::zeros([3, 4, 1])).is_err());
    }

    #[test]
    fn permuted_elements_give_different_field() {
        let part = ElementPartition::new(4, 4, 2).unwrap();
        let f = ramp(4, 4, 1);
        let e = part.partition(&f).unwrap();
        let mut swapped = e.data().to_vec();
        let (a, b) = swapped.split_at_mut(4);
        a.swap_with_slice(&mut b[..4]);
        let g = part
            .unpartition(&Tensor::new([4, 4, 1], swapped).unwrap())
            .unwrap();
        assert_ne!(g, f);
    }

    #[test]
    fn face_strips_of_2x2_element() {
        let part = ElementPartition::new(2, 2, 2).unwrap();
        // [a, b; c, d] = [1, 2; 3, 4]
        let e = part.partition(&ramp(2, 2, 1).map(|v| v + 1.0)).unwrap();
        let strip = |side| {
            part.face_samples(&e, FaceSpec { element: 0, side })
                .unwrap()
                .into_data()
        };
        assert_eq!(strip(Side::North), vec![1.0, 2.0]);
        assert_eq!(strip(Side::West), vec![1.0, 3.0]);
        assert_eq!(strip(Side::South), vec![3.0, 4.0]);
        assert_eq!(strip(Side::East), vec![2.0, 4.0]);

        let constant = part.partition(&Tensor::full([2, 2, 1], 0.4)).unwrap();
        let s = part
            .face_samples(&constant, FaceSpec { element: 0, side: Side::East })
            .unwrap();
        assert!(s.data().iter().all(|&v| v == 0.4));
        assert!(part
            .face_samples(&constant, FaceSpec { element: 1, side: Side::East })
            .is_err());
    }

    #[test]
    fn neighbor_examples() {
        let part = ElementPartition::new(4, 4, 2).unwrap();
        let e = part.element_at(0, 0);
        assert_eq!(
            part.neighbor(e, Side::West, BoundaryCondition::Periodic),
            Neighbor::Interior(part.element_at(0, 1))
        );
        assert_eq!(
            part.neighbor(e, Side::West, BoundaryCondition::Dirichlet),
            Neighbor::Boundary
        );
    }

    #[test]
    fn interior_adjacency_symmetric_3x3() {
        let part = ElementPartition::new(6, 6, 2).unwrap();
        for bc in BoundaryCondition::ALL {
            let map = part.neighbor_map(bc);
            for e in 0..part.count() {
                for side in Side::ALL {
                    if let Neighbor::Interior(n) = map.get(e, side) {
                        assert_eq!(map.get(n, side.opposite()), Neighbor::Interior(e));
                    } else {
                        assert_ne!(bc, BoundaryCondition::Periodic);
                    }
                }
            }
        }
    }

    #[test]
    fn shared_face_strips_are_adjacent_field_lines() {
        let part = ElementPartition::new(8, 12, 4).unwrap();
        for e in 0..part.count() {
            for side in Side::ALL {
                let Neighbor::Interior(n) = part.neighbor(e, side, BoundaryCondition::Dirichlet) else {
                    continue;
                };
                let mine = part.face_pixels(side);
                let theirs = part.face_pixels(side.opposite());
                for (a, b) in mine.iter().zip(&theirs) {
                    let (pa, pb) = (part.field_pixel(e, *a), part.field_pixel(n, *b));
                    let (ya, xa) = (pa / 12, pa % 12);
                    let (yb, xb) = (pb / 12, pb % 12);
                    let dist = ya.abs_diff(yb) + xa.abs_diff(xb);
                    assert_eq!(dist, 1, "e={e} side={side:?}");
                }
            }
        }
    }

    #[test]
    fn periodic_neighbors_commute_with_grid_shifts() {
        let part = ElementPartition::new(12, 8, 4).unwrap();
        let (rows, cols) = part.grid();
        let shift = |e: usize, dr: usize, dc: usize| {
            let (r, c) = part.coords(e);
            part.element_at((r + dr) % rows, (c + dc) % cols)
        };
        for dr in 0..rows {
            for dc in 0..cols {
                for e in 0..part.count() {
                    for side in Side::ALL {
                        let Neighbor::Interior(n) = part.neighbor(e, side, BoundaryCondition::Periodic) else {
                            panic!("periodic boundary marker");
                        };
                        let shifted = part.neighbor(shift(e, dr, dc), side, BoundaryCondition::Periodic);
                        assert_eq!(shifted, Neighbor::Interior(shift(n, dr, dc)));
                    }
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn partition_round_trip(eh in 1usize..4, ew in 1usize..4, p in 1usize..5, c in 1usize..4, seed in 0u64..1000) {
            let (h, w) = (eh * p, ew * p);
            let data: Vec<f64> = (0..h * w * c).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 7.0).collect();
            let f = Tensor::new([h, w, c], data).unwrap();
            let part = ElementPartition::new(h, w, p).unwrap();
            let back = part.unpartition(&part.partition(&f).unwrap()).unwrap();
            proptest::prop_assert_eq!(back, f);
        }
    }

    #[test]
    fn round_trip_16x24x3() {
        let part = ElementPartition::new(16, 24, 4).unwrap();
        let f = ramp(16, 24, 3).map(|v| (v * 0.37).sin());
        assert_eq!(part.unpartition(&part.partition(&f).unwrap()).unwrap(), f);
    }
}
