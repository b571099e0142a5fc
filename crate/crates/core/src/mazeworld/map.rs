//! Maze map generation: connected grid mazes with colored edge walls.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::numcore::rng::stream;

/// Grid maze with walls on cell edges. Each present wall carries a palette
/// color index; colors repeat across the map.
#[derive(Debug, Clone, PartialEq)]
pub struct MazeMap {
    width: usize,
    height: usize,
    /// `(width+1) x height`; entry `(x, y)` is the wall between cells
    /// `(x-1, y)` and `(x, y)` (column `x = 0` and `x = width` are the
    /// outer boundary).
    vwalls: Vec<Option<u8>>,
    /// `width x (height+1)`; entry `(x, y)` is the wall between cells
    /// `(x, y-1)` and `(x, y)`.
    hwalls: Vec<Option<u8>>,
}

impl MazeMap {
    /// Deterministic maze generation: depth-first spanning tree carving,
    /// then `braid` of the dead ends opened into loops. Pure function of
    /// the inputs.
    pub fn generate(seed: u64, width: usize, height: usize, braid: f64, colors: usize) -> Self {
        assert!(width >= 2 && height >= 2, "maze must be at least 2x2");
        assert!(colors >= 1 && colors <= 255);
        let mut rng = stream(seed, "maze", 0);
        let mut map = MazeMap {
            width,
            height,
            vwalls: vec![None; (width + 1) * height],
            hwalls: vec![None; width * (height + 1)],
        };
        // start fully walled, with colors drawn per edge
        for v in map.vwalls.iter_mut() {
            *v = Some(rng.gen_range(0..colors) as u8);
        }
        for h in map.hwalls.iter_mut() {
            *h = Some(rng.gen_range(0..colors) as u8);
        }

        // iterative depth-first carve
        let mut visited = vec![false; width * height];
        let mut stack = vec![(0usize, 0usize)];
        visited[0] = true;
        while let Some(&(cx, cy)) = stack.last() {
            let mut neighbors = Vec::with_capacity(4);
            if cx > 0 && !visited[cy * width + cx - 1] {
                neighbors.push((cx - 1, cy));
            }
            if cx + 1 < width && !visited[cy * width + cx + 1] {
                neighbors.push((cx + 1, cy));
            }
            if cy > 0 && !visited[(cy - 1) * width + cx] {
                neighbors.push((cx, cy - 1));
            }
            if cy + 1 < height && !visited[(cy + 1) * width + cx] {
                neighbors.push((cx, cy + 1));
            }
            match neighbors.choose(&mut rng) {
                Some(&(nx, ny)) => {
                    map.remove_wall_between((cx, cy), (nx, ny));
                    visited[ny * width + nx] = true;
                    stack.push((nx, ny));
                }
                None => {
                    stack.pop();
                }
            }
        }

        // braid: open a random extra wall at a fraction of the dead ends
        if braid > 0.0 {
            let mut dead_ends: Vec<(usize, usize)> = (0..width * height)
                .filter(|&i| {
                    let (x, y) = (i % width, i / width);
                    map.open_neighbors(x, y).len() == 1
                })
                .map(|i| (i % width, i / width))
                .collect();
            dead_ends.shuffle(&mut rng);
            let n_open = (dead_ends.len() as f64 * braid).round() as usize;
            for &(x, y) in dead_ends.iter().take(n_open) {
                let mut walled: Vec<(usize, usize)> = Vec::new();
                if x > 0 && map.wall_between((x, y), (x - 1, y)).is_some() {
                    walled.push((x - 1, y));
                }
                if x + 1 < width && map.wall_between((x, y), (x + 1, y)).is_some() {
                    walled.push((x + 1, y));
                }
                if y > 0 && map.wall_between((x, y), (x, y - 1)).is_some() {
                    walled.push((x, y - 1));
                }
                if y + 1 < height && map.wall_between((x, y), (x, y + 1)).is_some() {
                    walled.push((x, y + 1));
                }
                if let Some(&n) = walled.choose(&mut rng) {
                    map.remove_wall_between((x, y), n);
                }
            }
        }

        debug_assert!(map.all_connected());
        map
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Wall color between a cell and the cell left of column `x` in row `y`
    /// (vertical wall at grid column `x`, `0..=width`).
    pub fn vwall(&self, x: usize, y: usize) -> Option<u8> {
        self.vwalls[y * (self.width + 1) + x]
    }

    /// Horizontal wall at grid row `y` (`0..=height`) under/over column `x`.
    pub fn hwall(&self, x: usize, y: usize) -> Option<u8> {
        self.hwalls[y * self.width + x]
    }

    pub fn wall_between(&self, a: (usize, usize), b: (usize, usize)) -> Option<u8> {
        let ((ax, ay), (bx, by)) = (a, b);
        if ay == by && ax.abs_diff(bx) == 1 {
            self.vwall(ax.max(bx), ay)
        } else if ax == bx && ay.abs_diff(by) == 1 {
            self.hwall(ax, ay.max(by))
        } else {
            panic!("cells {a:?} and {b:?} are not adjacent");
        }
    }

    fn remove_wall_between(&mut self, a: (usize, usize), b: (usize, usize)) {
        let ((ax, ay), (bx, by)) = (a, b);
        if ay == by && ax.abs_diff(bx) == 1 {
            self.vwalls[ay * (self.width + 1) + ax.max(bx)] = None;
        } else if ax == bx && ay.abs_diff(by) == 1 {
            self.hwalls[ay.max(by) * self.width + ax] = None;
        } else {
            panic!("cells {a:?} and {b:?} are not adjacent");
        }
    }

    pub fn open_neighbors(&self, x: usize, y: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(4);
        if x > 0 && self.vwall(x, y).is_none() {
            out.push((x - 1, y));
        }
        if x + 1 <= self.width && self.vwall(x + 1, y).is_none() {
            out.push((x + 1, y));
        }
        if y > 0 && self.hwall(x, y).is_none() {
            out.push((x, y - 1));
        }
        if self.hwall(x, y + 1).is_none() {
            out.push((x, y + 1));
        }
        out
    }

    /// Flood fill from (0, 0); true when every cell is reachable.
    pub fn all_connected(&self) -> bool {
        let mut seen = vec![false; self.width * self.height];
        let mut stack = vec![(0usize, 0usize)];
        seen[0] = true;
        let mut count = 1;
        while let Some((x, y)) = stack.pop() {
            for (nx, ny) in self.open_neighbors(x, y) {
                if !seen[ny * self.width + nx] {
                    seen[ny * self.width + nx] = true;
                    count += 1;
                    stack.push((nx, ny));
                }
            }
        }
        count == self.width * self.height
    }

    /// Number of interior walls present (boundary walls excluded).
    pub fn internal_wall_count(&self) -> usize {
        let mut n = 0;
        for y in 0..self.height {
            for x in 1..self.width {
                if self.vwall(x, y).is_some() {
                    n += 1;
                }
            }
        }
        for y in 1..self.height {
            for x in 0..self.width {
                if self.hwall(x, y).is_some() {
                    n += 1;
                }
            }
        }
        n
    }

    /// ASCII dump, one `+`/`-`/`|` glyph per half-edge, for documentation.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for y in (0..self.height).rev() {
            // top edge of row y printed when y == height-1
            if y == self.height - 1 {
                for x in 0..self.width {
                    s.push('+');
                    s.push_str(if self.hwall(x, y + 1).is_some() { "--" } else { "  " });
                }
                s.push_str("+\n");
            }
            for x in 0..self.width {
                s.push(if self.vwall(x, y).is_some() { '|' } else { ' ' });
                s.push_str("  ");
            }
            s.push(if self.vwall(self.width, y).is_some() { '|' } else { ' ' });
            s.push('\n');
            for x in 0..self.width {
                s.push('+');
                s.push_str(if self.hwall(x, y).is_some() { "--" } else { "  " });
            }
            s.push_str("+\n");
        }
        s
    }
}
