//! Shortest-path planning on the quantized (cell, heading) graph.
//!
//! Planning works on four compass headings where `Forward` moves one cell
//! and turns rotate 90 degrees; every action costs one. The planner
//! computes distances-to-goal by breadth-first search over reverse edges
//! and then walks forward greedily, so ties always resolve in the fixed
//! action order Forward < TurnLeft < TurnRight.

use std::collections::VecDeque;

use thiserror::Error;

use crate::mazeworld::{Action, MazeMap};

/// Compass heading used at planning granularity: 0 = +x, 1 = +y, 2 = -x,
/// 3 = -y (counterclockwise).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Compass(pub u8);

impl Compass {
    pub fn left(self) -> Compass {
        Compass((self.0 + 1) % 4)
    }
    pub fn right(self) -> Compass {
        Compass((self.0 + 3) % 4)
    }
    pub fn delta(self) -> (isize, isize) {
        match self.0 {
            0 => (1, 0),
            1 => (0, 1),
            2 => (-1, 0),
            _ => (0, -1),
        }
    }
    /// Heading ticks for this compass direction (exact quarter turns).
    pub fn ticks(self) -> u32 {
        u32::from(self.0 % 4).wrapping_mul(1u32 << 30)
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("goal cell {0:?} is unreachable from {1:?}")]
    Unreachable((usize, usize), (usize, usize)),
    #[error("cell {0:?} is outside the map")]
    OutOfBounds((usize, usize)),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PlanState {
    pub cell: (usize, usize),
    pub heading: Compass,
}

fn state_index(map: &MazeMap, s: PlanState) -> usize {
    (s.cell.1 * map.width() + s.cell.0) * 4 + s.heading.0 as usize
}

fn forward_of(map: &MazeMap, s: PlanState) -> Option<PlanState> {
    let (dx, dy) = s.heading.delta();
    let nx = s.cell.0 as isize + dx;
    let ny = s.cell.1 as isize + dy;
    if nx < 0 || ny < 0 || nx >= map.width() as isize || ny >= map.height() as isize {
        return None;
    }
    let to = (nx as usize, ny as usize);
    if map.wall_between(s.cell, to).is_some() {
        return None;
    }
    Some(PlanState { cell: to, heading: s.heading })
}

fn successor(map: &MazeMap, s: PlanState, a: Action) -> Option<PlanState> {
    match a {
        Action::Forward => forward_of(map, s),
        Action::TurnLeft => Some(PlanState { heading: s.heading.left(), ..s }),
        Action::TurnRight => Some(PlanState { heading: s.heading.right(), ..s }),
    }
}

/// Distance from every state to the goal cell (any arrival heading),
/// computed by BFS over reverse edges. `u32::MAX` marks unreachable.
pub fn distances_to_goal(map: &MazeMap, goal: (usize, usize)) -> Vec<u32> {
    let n = map.width() * map.height() * 4;
    let mut dist = vec![u32::MAX; n];
    let mut queue = VecDeque::new();
    for h in 0..4 {
        let s = PlanState { cell: goal, heading: Compass(h) };
        dist[state_index(map, s)] = 0;
        queue.push_back(s);
    }
    while let Some(s) = queue.pop_front() {
        let d = dist[state_index(map, s)];
        // predecessors: states t with successor(t, a) == s for some action
        let mut preds = Vec::with_capacity(3);
        // reverse of Forward: the state one cell behind, same heading
        let (dx, dy) = s.heading.delta();
        let px = s.cell.0 as isize - dx;
        let py = s.cell.1 as isize - dy;
        if px >= 0 && py >= 0 && (px as usize) < map.width() && (py as usize) < map.height() {
            let from = (px as usize, py as usize);
            if map.wall_between(from, s.cell).is_none() {
                preds.push(PlanState { cell: from, heading: s.heading });
            }
        }
        // reverse of TurnLeft / TurnRight
        preds.push(PlanState { heading: s.heading.right(), ..s });
        preds.push(PlanState { heading: s.heading.left(), ..s });
        for p in preds {
            let i = state_index(map, p);
            if dist[i] == u32::MAX {
                dist[i] = d + 1;
                queue.push_back(p);
            }
        }
    }
    dist
}

/// Minimal-cost action sequence from `start` to `goal`; among shortest
/// paths it returns the lexicographically smallest one in the order
/// Forward < TurnLeft < TurnRight.
pub fn plan(map: &MazeMap, start: PlanState, goal: (usize, usize)) -> Result<Vec<Action>, PlanError> {
    if start.cell.0 >= map.width() || start.cell.1 >= map.height() {
        return Err(PlanError::OutOfBounds(start.cell));
    }
    if goal.0 >= map.width() || goal.1 >= map.height() {
        return Err(PlanError::OutOfBounds(goal));
    }
    let dist = distances_to_goal(map, goal);
    let d0 = dist[state_index(map, start)];
    if d0 == u32::MAX {
        return Err(PlanError::Unreachable(goal, start.cell));
    }
    let mut actions = Vec::with_capacity(d0 as usize);
    let mut s = start;
    let mut remaining = d0;
    while remaining > 0 {
        let mut advanced = false;
        for a in Action::ALL {
            if let Some(next) = successor(map, s, a) {
                if dist[state_index(map, next)] == remaining - 1 {
                    actions.push(a);
                    s = next;
                    remaining -= 1;
                    advanced = true;
                    break;
                }
            }
        }
        debug_assert!(advanced, "distance field must admit a descending action");
        if !advanced {
            break;
        }
    }
    Ok(actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn start_equals_goal_gives_empty_plan() {
        let map = MazeMap::generate(7, 3, 3, 0.0, 6);
        let s = PlanState { cell: (1, 1), heading: Compass(0) };
        assert!(plan(&map, s, (1, 1)).unwrap().is_empty());
    }

    #[test]
    fn straight_corridor_plans_forward_forward() {
        // 3x2 maze from seed search: pick any map with an open straight
        // east run of 3 cells in some row and verify the pure-forward plan.
        'seeds: for seed in 0..50u64 {
            let map = MazeMap::generate(seed, 5, 5, 0.4, 6);
            for y in 0..5 {
                for x in 0..3 {
                    if map.vwall(x + 1, y).is_none() && map.vwall(x + 2, y).is_none() {
                        let s = PlanState { cell: (x, y), heading: Compass(0) };
                        let actions = plan(&map, s, (x + 2, y)).unwrap();
                        assert_eq!(actions, vec![Action::Forward, Action::Forward]);
                        break 'seeds;
                    }
                }
            }
        }
    }

    /// Independent forward-BFS oracle over the (cell, heading) graph.
    fn bfs_cost(map: &MazeMap, start: PlanState, goal: (usize, usize)) -> Option<u32> {
        let mut dist: HashMap<PlanState, u32> = HashMap::new();
        let mut q = std::collections::VecDeque::new();
        dist.insert(start, 0);
        q.push_back(start);
        while let Some(s) = q.pop_front() {
            let d = dist[&s];
            if s.cell == goal {
                return Some(d);
            }
            for a in Action::ALL {
                if let Some(n) = successor(map, s, a) {
                    dist.entry(n).or_insert_with(|| {
                        q.push_back(n);
                        d + 1
                    });
                }
            }
        }
        None
    }

    #[test]
    fn plan_cost_matches_bfs_oracle_exhaustively() {
        for seed in [3u64, 11, 42] {
            for (w, h) in [(3usize, 3usize), (5, 4), (9, 9)] {
                let map = MazeMap::generate(seed, w, h, 0.2, 6);
                for sx in 0..w {
                    for sy in (0..h).step_by(2) {
                        let start = PlanState { cell: (sx, sy), heading: Compass((sx % 4) as u8) };
                        for gx in (0..w).step_by(2) {
                            for gy in 0..h {
                                let p = plan(&map, start, (gx, gy)).unwrap();
                                let oracle = bfs_cost(&map, start, (gx, gy)).unwrap();
                                assert_eq!(p.len() as u32, oracle, "seed {seed} {start:?} -> ({gx},{gy})");
                                // replay the plan; it must land on the goal
                                let mut s = start;
                                for &a in &p {
                                    s = successor(&map, s, a).unwrap();
                                }
                                assert_eq!(s.cell, (gx, gy));
                            }
                        }
                    }
                }
            }
        }
    }
}
