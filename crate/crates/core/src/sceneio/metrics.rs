use crate::Error;

/// Reported when the two images are identical.
pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(1 / MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(image: &[[f64; 3]], reference: &[[f64; 3]]) -> Result<f64, Error> {
    if image.len() != reference.len() || image.is_empty() {
        return Err(Error::Data(format!("psnr of {} vs {} pixels", image.len(), reference.len())));
    }
    let sum: f64 = image
        .iter()
        .zip(reference)
        .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).powi(2)))
        .sum();
    let mse = sum / (3 * image.len()) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Uniform grid over a point set for nearest-neighbour queries.
struct Grid<'a> {
    points: &'a [[f64; 3]],
    lo: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    start: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [[f64; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max).max(1e-9);
        // about two points per occupied cell on a surface
        let per_axis = (points.len() as f64 / 2.0).sqrt().clamp(1.0, 512.0);
        let cell = extent / per_axis;
        let dims: [usize; 3] = std::array::from_fn(|k| ((hi[k] - lo[k]) / cell) as usize + 1);
        let mut grid = Grid { points, lo, cell, dims, start: Vec::new(), order: Vec::new() };
        // counting sort of points by cell
        let cells = dims[0] * dims[1] * dims[2];
        let keys: Vec<usize> = points.iter().map(|&p| grid.key(grid.coords(p))).collect();
        let mut start = vec![0; cells + 1];
        for &k in &keys {
            start[k + 1] += 1;
        }
        for i in 0..cells {
            start[i + 1] += start[i];
        }
        let mut fill = start.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        grid.start = start;
        grid.order = order;
        grid
    }

    fn coords(&self, p: [f64; 3]) -> [i64; 3] {
        std::array::from_fn(|k| (((p[k] - self.lo[k]) / self.cell).floor() as i64).clamp(0, self.dims[k] as i64 - 1))
    }

    fn key(&self, c: [i64; 3]) -> usize {
        (c[0] as usize * self.dims[1] + c[1] as usize) * self.dims[2] + c[2] as usize
    }

    fn nearest2(&self, q: [f64; 3]) -> f64 {
        let c = self.coords(q);
        // distance from q to the boundary of its (clamped) home cell region
        let outside: f64 = (0..3)
            .map(|k| {
                let lo = self.lo[k] + c[k] as f64 * self.cell;
                let hi = lo + self.cell;
                (lo - q[k]).max(q[k] - hi).max(0.0).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        let max_ring = *self.dims.iter().max().unwrap() as i64;
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let cc = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if (0..3).any(|k| cc[k] < 0 || cc[k] >= self.dims[k] as i64) {
                            continue;
                        }
                        let key = self.key(cc);
                        for &i in &self.order[self.start[key]..self.start[key + 1]] {
                            best = best.min(dist2(q, self.points[i]));
                        }
                    }
                }
            }
            // anything in a later ring is at least this far away
            let bound = (ring as f64 * self.cell - outside).max(0.0);
            if best <= bound * bound {
                break;
            }
        }
        best
    }
}

fn mean_nearest(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let grid = Grid::new(to);
    from.iter().map(|&p| grid.nearest2(p).sqrt()).sum::<f64>() / from.len() as f64
}

/// Symmetric mean nearest-neighbour distance,
/// `½ (mean_a min_b ‖a − b‖ + mean_b min_a ‖a − b‖)`.
pub fn chamfer_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64, Error> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("chamfer distance of an empty point set".into()));
    }
    Ok(0.5 * (mean_nearest(a, b) + mean_nearest(b, a)))
}

/// Quadratic-time reference for [`chamfer_distance`].
pub fn chamfer_brute_force(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let one = |x: &[[f64; 3]], y: &[[f64; 3]]| {
        x.iter()
            .map(|&p| y.iter().map(|&q| dist2(p, q)).fold(f64::INFINITY, f64::min).sqrt())
            .sum::<f64>()
            / x.len() as f64
    };
    0.5 * (one(a, b) + one(b, a))
}
