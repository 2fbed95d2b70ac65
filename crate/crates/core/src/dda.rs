//! Amanatides–Woo cell traversal shared by the free-space carver and the
//! triangle-grid depth renderer.

use nalgebra::Vector3;

/// Walks the cells of a uniform grid pierced by `origin + t*dir` for
/// t in (0, t_stop], clipped to the grid box. The visitor receives the cell
/// index and the parameter at which the ray leaves the cell; returning false
/// stops the walk.
pub(crate) fn walk_cells<F: FnMut([usize; 3], f64) -> bool>(
    grid_origin: &Vector3<f64>,
    pitch: f64,
    dims: [usize; 3],
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    t_stop: f64,
    mut visit: F,
) {
    let mut t0 = 0.0f64;
    let mut t1 = t_stop;
    for axis in 0..3 {
        let o = origin[axis] - grid_origin[axis];
        let d = dir[axis];
        let side = dims[axis] as f64 * pitch;
        if d.abs() < 1e-15 {
            if o < 0.0 || o > side {
                return;
            }
            continue;
        }
        let ta = -o / d;
        let tb = (side - o) / d;
        let (ta, tb) = if ta <= tb { (ta, tb) } else { (tb, ta) };
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    if t0 >= t1 {
        return;
    }
    let start = origin + dir * (t0 + 1e-12);
    let mut cell = [0isize; 3];
    for axis in 0..3 {
        let c = ((start[axis] - grid_origin[axis]) / pitch).floor() as isize;
        cell[axis] = c.clamp(0, dims[axis] as isize - 1);
    }
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    let mut step = [0isize; 3];
    for axis in 0..3 {
        let d = dir[axis];
        if d.abs() < 1e-15 {
            continue;
        }
        step[axis] = if d > 0.0 { 1 } else { -1 };
        let next_boundary = grid_origin[axis] + (cell[axis] + if d > 0.0 { 1 } else { 0 }) as f64 * pitch;
        t_max[axis] = (next_boundary - origin[axis]) / d;
        t_delta[axis] = pitch / d.abs();
    }
    loop {
        let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        let t_exit = t_max[axis].min(t1);
        if !visit([cell[0] as usize, cell[1] as usize, cell[2] as usize], t_exit) {
            return;
        }
        if t_max[axis] > t1 {
            return;
        }
        cell[axis] += step[axis];
        if cell[axis] < 0 || cell[axis] >= dims[axis] as isize {
            return;
        }
        t_max[axis] += t_delta[axis];
    }
}
