//! Multi-scale temporal mixing of D-Hyperpoint sequences.
//!
//! Each scale branch slides a window over the zero-padded sequence. Window
//! members receive a temporal order offset, pass through a residual D-KAN
//! block shared by every member and branch of the stack, and are merged by a
//! componentwise max together with the window's centre member.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kan::{dkan_block, DKanSpec, KanLayerParams, SplineGrid};
use crate::params::{Binder, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// One temporal scale: window radius, stride and zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub radius: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Branch {
    pub fn window(&self) -> usize {
        2 * self.radius + 1
    }

    /// Number of windows over a sequence of `len` steps.
    pub fn group_count(&self, len: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::contract("branch stride must be ≥ 1"));
        }
        let padded = len + 2 * self.padding;
        if self.window() > padded {
            return Err(Error::contract(format!(
                "window of {} exceeds padded length {padded}",
                self.window()
            )));
        }
        Ok((padded - self.window()) / self.stride + 1)
    }

    /// Source step of every member of every window, `None` for padding.
    pub fn member_index(&self, len: usize) -> Result<Vec<Option<usize>>> {
        let l = self.group_count(len)?;
        let mut out = Vec::with_capacity(l * self.window());
        for g in 0..l {
            for j in 0..self.window() {
                out.push(self.source(g * self.stride + j, len));
            }
        }
        Ok(out)
    }

    fn source(&self, padded_pos: usize, len: usize) -> Option<usize> {
        padded_pos.checked_sub(self.padding).filter(|&t| t < len)
    }

    /// Source step of each window's centre member.
    pub fn centre_index(&self, len: usize) -> Result<Vec<Option<usize>>> {
        let l = self.group_count(len)?;
        Ok((0..l).map(|g| self.source(g * self.stride + self.radius, len)).collect())
    }
}

/// Temporal order value of member `t_o` in a window of `t_l` members.
pub fn tov(t_o: usize, t_l: usize) -> f64 {
    if t_l <= 1 {
        0.0
    } else {
        // (2·t_o − (t_l − 1)) / (2·(t_l − 1)) has an exact integer
        // numerator, so mirrored members get exactly opposite values
        let span = (t_l - 1) as f64;
        (2.0 * t_o as f64 - span) / (2.0 * span)
    }
}

/// How a window's mixed members and its centre are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combine {
    #[default]
    Add,
    Concat,
}

/// One window of a D-Hyperpoint sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DHyperpointGroup {
    pub members: Vec<Vec<f64>>,
    /// source step of each member, `None` for zero padding
    pub positions: Vec<Option<usize>>,
    pub centre: Vec<f64>,
}

impl DHyperpointGroup {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Windows of one branch over a plain sequence, in temporal order.
pub fn group_dhyperpoints(seq: &[Vec<f64>], branch: &Branch) -> Result<Vec<DHyperpointGroup>> {
    let width = seq.first().map(|r| r.len()).ok_or_else(|| Error::contract("empty D-Hyperpoint sequence"))?;
    let len = seq.len();
    let members = branch.member_index(len)?;
    let centres = branch.centre_index(len)?;
    let fetch = |i: Option<usize>| i.map(|t| seq[t].clone()).unwrap_or_else(|| vec![0.0; width]);
    Ok(members
        .chunks(branch.window())
        .zip(centres)
        .map(|(idx, c)| DHyperpointGroup {
            members: idx.iter().map(|&i| fetch(i)).collect(),
            positions: idx.to_vec(),
            centre: fetch(c),
        })
        .collect())
}

/// Members shifted by their temporal order value.
pub fn dislocate(group: &DHyperpointGroup) -> Vec<Vec<f64>> {
    let t_l = group.len();
    group
        .members
        .iter()
        .enumerate()
        .map(|(t_o, h)| {
            let v = tov(t_o, t_l);
            h.iter().map(|x| x + v).collect()
        })
        .collect()
}

/// Dislocation followed by the residual D-KAN on every member.
pub fn stkm_forward(group: &DHyperpointGroup, dkan: &[KanLayerParams; 3]) -> Result<Vec<Vec<f64>>> {
    dislocate(group)
        .into_iter()
        .map(|x| {
            let y = dkan_block(&x, dkan)?;
            Ok(y.iter().zip(&x).map(|(a, b)| a + b).collect())
        })
        .collect()
}

/// Componentwise max over mixed members merged with the centre member.
pub fn mix_group(mixed: &[Vec<f64>], centre: &[f64], combine: Combine) -> Result<Vec<f64>> {
    let first = mixed.first().ok_or_else(|| Error::contract("cannot mix an empty group"))?;
    if mixed.iter().any(|m| m.len() != first.len()) || centre.len() != first.len() {
        return Err(Error::shape("mix_group", &[first.len()], &[centre.len()]));
    }
    let mut pooled = first.clone();
    for m in &mixed[1..] {
        for (p, &v) in pooled.iter_mut().zip(m) {
            if v > *p {
                *p = v;
            }
        }
    }
    Ok(match combine {
        Combine::Add => pooled.iter().zip(centre).map(|(a, b)| a + b).collect(),
        Combine::Concat => {
            pooled.extend_from_slice(centre);
            pooled
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixerConfig {
    pub branches: Vec<Branch>,
    pub stacks: usize,
    pub hidden: [usize; 2],
    pub grid: SplineGrid,
    pub combine: Combine,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig {
            branches: vec![
                Branch {
                    radius: 1,
                    stride: 1,
                    padding: 1,
                },
                Branch {
                    radius: 2,
                    stride: 1,
                    padding: 2,
                },
            ],
            stacks: 2,
            hidden: [16, 16],
            grid: SplineGrid::default(),
            combine: Combine::Add,
        }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::contract("mixer needs at least one branch"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::contract("D-KAN hidden widths must be positive"));
        }
        self.grid.validate()
    }

    /// Input width of each stack followed by the final output width.
    pub fn widths(&self, input: usize) -> Vec<usize> {
        let factor = self.branches.len() * if self.combine == Combine::Concat { 2 } else { 1 };
        let mut w = vec![input];
        for _ in 0..self.stacks {
            w.push(w.last().expect("non-empty") * factor);
        }
        w
    }

    pub fn output_width(&self, input: usize) -> usize {
        *self.widths(input).last().expect("non-empty")
    }

    /// Sequence length after all stacks.
    pub fn output_len(&self, len: usize) -> Result<usize> {
        let mut len = len;
        for _ in 0..self.stacks {
            len = self.fused_len(len)?;
        }
        Ok(len)
    }

    fn fused_len(&self, len: usize) -> Result<usize> {
        let lens = self.branches.iter().map(|b| b.group_count(len)).collect::<Result<Vec<_>>>()?;
        if lens.iter().any(|&l| l != lens[0]) {
            return Err(Error::contract(format!("branch lengths differ and cannot be fused: {lens:?}")));
        }
        Ok(lens[0])
    }

    pub fn dkan(&self, width: usize) -> DKanSpec {
        DKanSpec {
            width,
            hidden: self.hidden,
            grid: self.grid.clone(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, input: usize, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        for (s, w) in self.widths(input).into_iter().take(self.stacks).enumerate() {
            self.dkan(w).init(store, &format!("{prefix}.{s}.dkan"), rng)?;
        }
        Ok(())
    }
}

fn branch_graph(g: &mut Graph, p: &mut Binder, dkan: &DKanSpec, dkan_prefix: &str, branch: &Branch, combine: Combine, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (len, width) = (s[0], s[1]);
    let t_l = branch.window();
    let idx = branch.member_index(len)?;
    let groups = idx.len() / t_l;
    let members = g.gather_rows_padded(x, &idx)?;
    let order: Vec<f64> = (0..groups).flat_map(|_| (0..t_l).map(|t| tov(t, t_l))).collect();
    let order = g.constant(Tensor::new(vec![groups * t_l, 1], order)?);
    let xd = g.add(members, order)?;
    let mixed = dkan.forward(g, p, dkan_prefix, xd)?;
    let y = g.add(mixed, xd)?;
    let y = g.reshape(y, &[groups, t_l, width])?;
    let pooled = g.max(y, 1)?;
    let centre = g.gather_rows_padded(x, &branch.centre_index(len)?)?;
    match combine {
        Combine::Add => g.add(pooled, centre),
        Combine::Concat => g.concat(&[pooled, centre]),
    }
}

/// One mixer stack: every branch, fused along the feature axis.
pub fn mixer_stack_graph(g: &mut Graph, p: &mut Binder, cfg: &MixerConfig, prefix: &str, stack: usize, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("kansmixer", &s, &[0, 0]));
    }
    cfg.fused_len(s[0])?;
    let dkan = cfg.dkan(s[1]);
    let dp = format!("{prefix}.{stack}.dkan");
    let outs = cfg
        .branches
        .iter()
        .map(|b| branch_graph(g, p, &dkan, &dp, b, cfg.combine, x))
        .collect::<Result<Vec<_>>>()?;
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs)
    }
}

/// All stacks on a `T × width` node.
pub fn kansmixer_graph(g: &mut Graph, p: &mut Binder, cfg: &MixerConfig, prefix: &str, x: Var) -> Result<Var> {
    cfg.validate()?;
    let mut h = x;
    for s in 0..cfg.stacks {
        h = mixer_stack_graph(g, p, cfg, prefix, s, h)?;
    }
    Ok(h)
}

/// Plain-vector evaluation of all stacks, built from the per-group
/// operations rather than the graph.
pub fn kansmixer_forward(seq: &[Vec<f64>], cfg: &MixerConfig, store: &ParamStore, prefix: &str) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mut h = seq.to_vec();
    for s in 0..cfg.stacks {
        let width = h.first().map(|r| r.len()).ok_or_else(|| Error::contract("empty D-Hyperpoint sequence"))?;
        cfg.fused_len(h.len())?;
        let layers = cfg.dkan(width).layers_from_store(store, &format!("{prefix}.{s}.dkan"))?;
        let mut branches = Vec::with_capacity(cfg.branches.len());
        for b in &cfg.branches {
            let rows = group_dhyperpoints(&h, b)?
                .iter()
                .map(|grp| mix_group(&stkm_forward(grp, &layers)?, &grp.centre, cfg.combine))
                .collect::<Result<Vec<_>>>()?;
            branches.push(rows);
        }
        h = (0..branches[0].len())
            .map(|t| branches.iter().flat_map(|b| b[t].iter().copied()).collect())
            .collect();
    }
    Ok(h)
}
