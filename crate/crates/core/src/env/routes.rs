//! Versioned traffic-junction route tables.
//!
//! File format: `#` comment lines, a `version <n>` line, a `grid <rows> <cols>`
//! line, then one route per line as comma-separated linear cell indices
//! (`row * cols + col`). The first cell is the arrival point, the last one the
//! goal. Route ids are 1-based line order.

use std::collections::VecDeque;

use crate::error::{Error, Result};

pub const ROUTE_TABLE_VERSION: u32 = 1;
pub const EASY_ROUTES: &str = include_str!("../../data/routes_easy_v1.txt");
pub const HARD_ROUTES: &str = include_str!("../../data/routes_hard_v1.txt");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RouteTable {
    pub version: u32,
    pub rows: usize,
    pub cols: usize,
    pub routes: Vec<Vec<usize>>,
}

impl RouteTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let mut grid = None;
        let mut routes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Config(format!("route table line {}: {what}", lineno + 1));
            if let Some(v) = line.strip_prefix("version ") {
                version = Some(v.trim().parse::<u32>().map_err(|_| bad("bad version"))?);
            } else if let Some(g) = line.strip_prefix("grid ") {
                let parts: Vec<usize> = g
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("bad grid"))?;
                if parts.len() != 2 {
                    return Err(bad("grid needs rows and cols"));
                }
                grid = Some((parts[0], parts[1]));
            } else {
                let cells: Vec<usize> = line
                    .split(',')
                    .map(|c| c.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("bad cell index"))?;
                if cells.len() < 2 {
                    return Err(bad("route needs at least two cells"));
                }
                routes.push(cells);
            }
        }
        let version = version.ok_or_else(|| Error::Config("route table has no version".into()))?;
        if version != ROUTE_TABLE_VERSION {
            return Err(Error::Config(format!("unsupported route table version {version}")));
        }
        let (rows, cols) = grid.ok_or_else(|| Error::Config("route table has no grid".into()))?;
        let table = RouteTable {
            version,
            rows,
            cols,
            routes,
        };
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<()> {
        for (i, r) in self.routes.iter().enumerate() {
            for w in r.windows(2) {
                if w.iter().any(|&c| c >= self.rows * self.cols) {
                    return Err(Error::Config(format!("route {} leaves the grid", i + 1)));
                }
                let (a, b) = (self.cell(w[0]), self.cell(w[1]));
                if a.0.abs_diff(b.0) + a.1.abs_diff(b.1) != 1 {
                    return Err(Error::Config(format!("route {} is not contiguous", i + 1)));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self, title: &str) -> String {
        let mut s = format!(
            "# {title}\nversion {}\ngrid {} {}\n",
            self.version, self.rows, self.cols
        );
        for r in &self.routes {
            let cells: Vec<String> = r.iter().map(usize::to_string).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn cell(&self, idx: usize) -> (usize, usize) {
        (idx / self.cols, idx % self.cols)
    }

    /// Distinct arrival cells in first-seen order.
    pub fn arrival_points(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for r in &self.routes {
            if !out.contains(&r[0]) {
                out.push(r[0]);
            }
        }
        out
    }

    /// Indices of routes starting at `arrival`.
    pub fn routes_from(&self, arrival: usize) -> Vec<usize> {
        (0..self.routes.len())
            .filter(|&i| self.routes[i][0] == arrival)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dir {
    East,
    West,
    South,
    North,
}

/// One-way lanes on a grid; a cell on both a horizontal and a vertical lane
/// is a junction cell where a car may continue either way.
struct LaneGrid {
    rows: usize,
    cols: usize,
    horizontal: Vec<(usize, Dir)>,
    vertical: Vec<(usize, Dir)>,
}

impl LaneGrid {
    fn successors(&self, (r, c): (usize, usize)) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if let Some(&(_, d)) = self.horizontal.iter().find(|(row, _)| *row == r) {
            match d {
                Dir::East if c + 1 < self.cols => out.push((r, c + 1)),
                Dir::West if c > 0 => out.push((r, c - 1)),
                _ => {}
            }
        }
        if let Some(&(_, d)) = self.vertical.iter().find(|(col, _)| *col == c) {
            match d {
                Dir::South if r + 1 < self.rows => out.push((r + 1, c)),
                Dir::North if r > 0 => out.push((r - 1, c)),
                _ => {}
            }
        }
        out
    }

    fn entry_exit(&self) -> Vec<((usize, usize), (usize, usize), usize)> {
        // (entry, exit, road id) per lane
        let mut lanes = Vec::new();
        for (i, &(row, d)) in self.horizontal.iter().enumerate() {
            let (a, b) = match d {
                Dir::East => ((row, 0), (row, self.cols - 1)),
                _ => ((row, self.cols - 1), (row, 0)),
            };
            lanes.push((a, b, i / 2));
        }
        for (i, &(col, d)) in self.vertical.iter().enumerate() {
            let (a, b) = match d {
                Dir::South => ((0, col), (self.rows - 1, col)),
                _ => ((self.rows - 1, col), (0, col)),
            };
            lanes.push((a, b, 100 + i / 2));
        }
        lanes
    }

    /// Breadth-first shortest path; successors are tried horizontal first.
    fn shortest_path(&self, from: (usize, usize), to: (usize, usize)) -> Option<Vec<usize>> {
        let idx = |(r, c): (usize, usize)| r * self.cols + c;
        let mut parent = vec![usize::MAX; self.rows * self.cols];
        let mut queue = VecDeque::from([from]);
        parent[idx(from)] = idx(from);
        while let Some(cur) = queue.pop_front() {
            if cur == to {
                let mut path = vec![idx(to)];
                let mut p = idx(to);
                while p != idx(from) {
                    p = parent[p];
                    path.push(p);
                }
                path.reverse();
                return Some(path);
            }
            for next in self.successors(cur) {
                if parent[idx(next)] == usize::MAX {
                    parent[idx(next)] = idx(cur);
                    queue.push_back(next);
                }
            }
        }
        None
    }
}

/// Two one-way roads crossing once on a 7x7 grid: eastbound on row 3,
/// southbound on column 3, one straight route each.
pub fn generate_easy() -> RouteTable {
    let lanes = LaneGrid {
        rows: 7,
        cols: 7,
        horizontal: vec![(3, Dir::East)],
        vertical: vec![(3, Dir::South)],
    };
    let routes = lanes
        .entry_exit()
        .into_iter()
        .map(|(a, b, _)| lanes.shortest_path(a, b).expect("straight lane"))
        .collect();
    RouteTable {
        version: ROUTE_TABLE_VERSION,
        rows: 7,
        cols: 7,
        routes,
    }
}

/// Two two-way horizontal roads crossing two two-way vertical roads on an
/// 18x18 grid (four junctions, right-hand traffic). Each of the eight
/// arrival points has one route to every exit except the opposite lane of
/// its own road: seven routes per arrival point.
pub fn generate_hard() -> RouteTable {
    let lanes = LaneGrid {
        rows: 18,
        cols: 18,
        horizontal: vec![
            (5, Dir::West),
            (6, Dir::East),
            (11, Dir::West),
            (12, Dir::East),
        ],
        vertical: vec![
            (5, Dir::South),
            (6, Dir::North),
            (11, Dir::South),
            (12, Dir::North),
        ],
    };
    let ends = lanes.entry_exit();
    let mut routes = Vec::new();
    for &(entry, _, road) in &ends {
        for &(_, exit, other_road) in &ends {
            if other_road == road {
                continue;
            }
            routes.push(lanes.shortest_path(entry, exit).expect("connected road network"));
        }
        let own_exit = ends
            .iter()
            .find(|(e, _, r)| *r == road && *e == entry)
            .map(|(_, x, _)| *x)
            .unwrap();
        routes.push(lanes.shortest_path(entry, own_exit).expect("straight lane"));
    }
    RouteTable {
        version: ROUTE_TABLE_VERSION,
        rows: 18,
        cols: 18,
        routes,
    }
}
