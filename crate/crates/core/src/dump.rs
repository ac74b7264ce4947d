//! Field dumps: a short text header followed by little-endian `f64` data,
//! and CSV export of 1-D slices.
//!
//! Header lines, each `key value...`, terminated by a line `end`:
//!
//! ```text
//! gradpoly-field 1
//! name deformation
//! nodes 9 9 9
//! origin 0 0 0
//! spacing 0.125 0.125 0.125
//! components 3
//! end
//! ```
//!
//! The payload is node-major: all components of node 0, then node 1, ...

use std::io::{self, BufRead, Read, Write};

use crate::grid::{Grid, GridSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct FieldDump {
    pub name: String,
    pub grid: GridSpec,
    pub components: usize,
    pub data: Vec<f64>,
}

impl FieldDump {
    pub fn new(name: impl Into<String>, grid: &Grid, components: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), grid.node_count() * components, "dump payload length");
        Self { name: name.into(), grid: grid.spec().clone(), components, data }
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        let g = &self.grid;
        let spacing: Vec<f64> = (0..3).map(|a| g.extents[a] / (g.nodes[a] - 1) as f64).collect();
        writeln!(w, "gradpoly-field 1")?;
        writeln!(w, "name {}", self.name)?;
        writeln!(w, "nodes {} {} {}", g.nodes[0], g.nodes[1], g.nodes[2])?;
        writeln!(w, "origin {:?} {:?} {:?}", g.origin[0], g.origin[1], g.origin[2])?;
        writeln!(w, "spacing {:?} {:?} {:?}", spacing[0], spacing[1], spacing[2])?;
        writeln!(w, "components {}", self.components)?;
        writeln!(w, "end")?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> io::Result<Self> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut r = io::BufReader::new(r);
        let mut name = String::new();
        let mut nodes = None;
        let mut origin = None;
        let mut spacing = None;
        let mut components = None;
        let mut first = true;
        loop {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("header not terminated"));
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or("");
            let rest: Vec<&str> = parts.collect();
            if first {
                if key != "gradpoly-field" || rest != ["1"] {
                    return Err(bad("not a field dump"));
                }
                first = false;
                continue;
            }
            let nums = |n: usize| -> io::Result<Vec<f64>> {
                let v: Result<Vec<f64>, _> = rest.iter().map(|s| s.parse::<f64>()).collect();
                match v {
                    Ok(v) if v.len() == n => Ok(v),
                    _ => Err(bad(&format!("malformed '{key}' line"))),
                }
            };
            match key {
                "name" => name = rest.join(" "),
                "nodes" => nodes = Some(nums(3)?.iter().map(|&x| x as usize).collect::<Vec<_>>()),
                "origin" => origin = Some(nums(3)?),
                "spacing" => spacing = Some(nums(3)?),
                "components" => components = Some(nums(1)?[0] as usize),
                "end" => break,
                _ => return Err(bad(&format!("unknown header key '{key}'"))),
            }
        }
        let (Some(nodes), Some(origin), Some(spacing), Some(components)) = (nodes, origin, spacing, components) else {
            return Err(bad("incomplete header"));
        };
        if nodes.iter().any(|&n| n < 2) {
            return Err(bad("bad node counts"));
        }
        let grid = GridSpec {
            origin: [origin[0], origin[1], origin[2]],
            extents: std::array::from_fn(|a| spacing[a] * (nodes[a] - 1) as f64),
            nodes: [nodes[0], nodes[1], nodes[2]],
        };
        let count = nodes.iter().product::<usize>() * components;
        let mut bytes = vec![0u8; count * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self { name, grid, components, data })
    }

    /// CSV of the line of nodes along `axis` through node `through`:
    /// columns `x,y,z,c0,c1,...`.
    pub fn write_slice_csv(&self, axis: usize, through: [usize; 3], w: impl Write) -> io::Result<()> {
        let g = &self.grid;
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["x".to_string(), "y".to_string(), "z".to_string()];
        header.extend((0..self.components).map(|c| format!("c{c}")));
        out.write_record(&header)?;
        for s in 0..g.nodes[axis] {
            let mut ijk = through;
            ijk[axis] = s;
            let n = ijk[0] + g.nodes[0] * (ijk[1] + g.nodes[1] * ijk[2]);
            let mut rec: Vec<String> = (0..3)
                .map(|a| (g.origin[a] + ijk[a] as f64 * g.extents[a] / (g.nodes[a] - 1) as f64).to_string())
                .collect();
            rec.extend(self.data[n * self.components..(n + 1) * self.components].iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()
    }
}
