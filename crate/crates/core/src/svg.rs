//! SVG plots of stage outputs. Output is a plain string built in a fixed
//! order, so identical inputs give identical bytes.

use std::fmt::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matching::{PatternLibrary, SegmentCluster};
use crate::model::{Bounds, Dataset, Environment};
use crate::partition::PartitionPrediction;
use crate::pipeline::{load_stage, segment_clusters, ClusterStage, MatchStage, PartitionStage, SimStage};
use crate::segment::Segment;

#[derive(Debug, Clone, PartialEq)]
pub struct Style {
    /// Image width in pixels; height follows the world aspect ratio.
    pub width: f64,
    pub margin: f64,
    pub stroke: f64,
    pub palette: Vec<String>,
}

impl Default for Style {
    fn default() -> Self {
        let palette = ["#1f77b4", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f"];
        Self {
            width: 800.0,
            margin: 40.0,
            stroke: 1.5,
            palette: palette.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Style {
    fn color(&self, k: usize) -> &str {
        &self.palette[k % self.palette.len()]
    }
}

pub enum Artifact<'a> {
    /// Trajectories colored by segment membership. With no segments every
    /// trajectory gets the first palette color and there is no legend.
    Trajectories { ds: &'a Dataset, segments: &'a [Segment] },
    /// Cluster members mapped into their pattern representative's frame.
    Patterns {
        ds: &'a Dataset,
        clusters: &'a [SegmentCluster],
        library: &'a PatternLibrary,
    },
    Partition {
        env: &'a Environment,
        prediction: &'a PartitionPrediction,
    },
}

struct Canvas<'s> {
    b: Bounds,
    scale: f64,
    height: f64,
    style: &'s Style,
    out: String,
}

impl<'s> Canvas<'s> {
    fn new(b: Bounds, style: &'s Style) -> Self {
        let span = (b.xmax - b.xmin).max(1e-9);
        let scale = (style.width - 2.0 * style.margin) / span;
        let height = (b.ymax - b.ymin).max(1e-9) * scale + 2.0 * style.margin;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{height:.0}" viewBox="0 0 {w:.0} {height:.0}">"#,
            w = style.width
        );
        Self { b, scale, height, style, out }
    }

    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        (
            self.style.margin + (p[0] - self.b.xmin) * self.scale,
            self.style.margin + (self.b.ymax - p[1]) * self.scale,
        )
    }

    fn points(&self, pts: &[[f64; 2]]) -> String {
        pts.iter()
            .map(|&p| {
                let (x, y) = self.px(p);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn axes(&mut self) {
        let m = self.style.margin;
        let w = self.style.width - 2.0 * m;
        let h = self.height - 2.0 * m;
        let _ = writeln!(
            self.out,
            r#"<g class="axes"><rect x="{m:.2}" y="{m:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="black" stroke-width="1"/>"#
        );
        for k in 0..=4 {
            let t = k as f64 / 4.0;
            let xv = self.b.xmin + t * (self.b.xmax - self.b.xmin);
            let yv = self.b.ymin + t * (self.b.ymax - self.b.ymin);
            let (x, _) = self.px([xv, self.b.ymin]);
            let (_, y) = self.px([self.b.xmin, yv]);
            let _ = writeln!(
                self.out,
                r#"<text x="{x:.2}" y="{:.2}" font-size="10" text-anchor="middle">{xv:.1}</text>"#,
                self.height - m + 14.0
            );
            let _ = writeln!(
                self.out,
                r#"<text x="{:.2}" y="{y:.2}" font-size="10" text-anchor="end">{yv:.1}</text>"#,
                m - 4.0
            );
        }
        self.out.push_str("</g>\n");
    }

    fn obstacles(&mut self, env: &Environment) {
        for poly in &env.obstacles {
            let pts = self.points(&poly.vertices);
            let _ = writeln!(self.out, r##"<polygon class="obstacle" points="{pts}" fill="#d0d0d0" stroke="#606060"/>"##);
        }
        let (gx, gy) = self.px([env.goal.x, env.goal.y]);
        let r = env.goal_tolerance * self.scale;
        let _ = writeln!(
            self.out,
            r##"<circle class="goal" cx="{gx:.2}" cy="{gy:.2}" r="{r:.2}" fill="none" stroke="#2ca02c" stroke-dasharray="4 2"/>"##
        );
    }

    fn polyline(&mut self, class: &str, pts: &[[f64; 2]], color: &str, width: f64) {
        if pts.len() < 2 {
            return;
        }
        let p = self.points(pts);
        let _ = writeln!(
            self.out,
            r#"<polyline class="{class}" points="{p}" fill="none" stroke="{color}" stroke-width="{width:.2}"/>"#
        );
    }

    fn line(&mut self, class: &str, a: [f64; 2], b: [f64; 2], color: &str, width: f64) {
        let (x1, y1) = self.px(a);
        let (x2, y2) = self.px(b);
        let _ = writeln!(
            self.out,
            r#"<line class="{class}" x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{color}" stroke-width="{width:.2}"/>"#
        );
    }

    fn legend(&mut self, entries: &[(String, String)]) {
        if entries.is_empty() {
            return;
        }
        let x0 = self.style.width - self.style.margin - 120.0;
        let y0 = self.style.margin + 8.0;
        self.out.push_str("<g class=\"legend\">\n");
        for (k, (label, color)) in entries.iter().enumerate() {
            let y = y0 + 16.0 * k as f64;
            let _ = writeln!(
                self.out,
                r#"<rect class="swatch" x="{x0:.2}" y="{:.2}" width="18" height="4" fill="{color}"/>"#,
                y - 2.0
            );
            let _ = writeln!(self.out, r#"<text x="{:.2}" y="{:.2}" font-size="11">{label}</text>"#, x0 + 24.0, y + 4.0);
        }
        self.out.push_str("</g>\n");
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn positions(ds: &Dataset, traj: usize, start: usize, end: usize) -> Vec<[f64; 2]> {
    let s = &ds.trajectories[traj].samples;
    s[start.min(s.len())..end.min(s.len())].iter().map(|x| [x.state.x, x.state.y]).collect()
}

pub fn render_svg(artifact: &Artifact, style: &Style) -> String {
    match artifact {
        Artifact::Trajectories { ds, segments } => {
            let mut c = Canvas::new(ds.env.bounds, style);
            c.axes();
            c.obstacles(&ds.env);
            if segments.is_empty() {
                for t in 0..ds.trajectories.len() {
                    let pts = positions(ds, t, 0, usize::MAX);
                    c.polyline("trajectory", &pts, style.color(0), style.stroke);
                }
            } else {
                let mut seen: Vec<usize> = Vec::new();
                for s in segments.iter() {
                    let pts = positions(ds, s.traj, s.start, s.end + 1);
                    let k = s.membership.saturating_sub(1);
                    c.polyline("segment", &pts, style.color(k), style.stroke);
                    if !seen.contains(&s.membership) {
                        seen.push(s.membership);
                    }
                }
                seen.sort_unstable();
                let entries: Vec<_> = seen
                    .iter()
                    .map(|&m| (format!("cluster {m}"), style.color(m.saturating_sub(1)).to_string()))
                    .collect();
                c.legend(&entries);
            }
            c.finish()
        }
        Artifact::Patterns { ds, clusters, library } => {
            let mut c = Canvas::new(ds.env.bounds, style);
            c.axes();
            c.obstacles(&ds.env);
            for t in 0..ds.trajectories.len() {
                let pts = positions(ds, t, 0, usize::MAX);
                c.polyline("trajectory", &pts, "#e0e0e0", style.stroke);
            }
            let mut entries = Vec::new();
            for (k, pat) in library.patterns.iter().enumerate() {
                for (cid, g) in pat.clusters.iter().zip(&pat.alignments) {
                    let Some(cl) = clusters.iter().find(|cl| cl.id == *cid) else { continue };
                    for m in &cl.members {
                        let pts: Vec<[f64; 2]> = m.iter().map(|&p| g.act_point(p)).collect();
                        c.polyline("aligned", &pts, style.color(k), style.stroke);
                    }
                }
                entries.push((format!("pattern {}", k + 1), style.color(k).to_string()));
            }
            c.legend(&entries);
            c.finish()
        }
        Artifact::Partition { env, prediction } => {
            let mut c = Canvas::new(env.bounds, style);
            c.axes();
            c.obstacles(env);
            let w = 2.0 * style.stroke;
            for pl in &prediction.repelling {
                c.polyline("repelling", pl, "red", w);
            }
            for seg in &prediction.attracting {
                c.line("attracting", seg[0], seg[1], "green", w);
            }
            let half = 2.0 * prediction.grid.spacing;
            for s in &prediction.subgoals {
                let n = [-s.heading.sin() * half, s.heading.cos() * half];
                c.line("subgoal", [s.pos[0] - n[0], s.pos[1] - n[1]], [s.pos[0] + n[0], s.pos[1] + n[1]], "black", 2.0 * w);
            }
            c.legend(&[
                ("subgoal".into(), "black".into()),
                ("repelling".into(), "red".into()),
                ("attracting".into(), "green".into()),
            ]);
            c.finish()
        }
    }
}

/// Render a persisted stage from a run directory. Kinds: `trajectories`,
/// `clusters`, `patterns`, `partition`.
pub fn render_stage(dir: &Path, kind: &str, style: &Style) -> Result<String> {
    match kind {
        "trajectories" => {
            let sim: SimStage = load_stage(dir, "simulate")?;
            Ok(render_svg(&Artifact::Trajectories { ds: &sim.dataset, segments: &[] }, style))
        }
        "clusters" => {
            let sim: SimStage = load_stage(dir, "simulate")?;
            let cl: ClusterStage = load_stage(dir, "cluster")?;
            Ok(render_svg(&Artifact::Trajectories { ds: &sim.dataset, segments: &cl.segments }, style))
        }
        "patterns" => {
            let sim: SimStage = load_stage(dir, "simulate")?;
            let cl: ClusterStage = load_stage(dir, "cluster")?;
            let m: MatchStage = load_stage(dir, "match")?;
            let clusters = segment_clusters(&sim.dataset, &cl.segments, cl.hidden.len());
            Ok(render_svg(
                &Artifact::Patterns { ds: &sim.dataset, clusters: &clusters, library: &m.library },
                style,
            ))
        }
        "partition" => {
            let sim: SimStage = load_stage(dir, "simulate")?;
            let p: PartitionStage = load_stage(dir, "partition")?;
            Ok(render_svg(&Artifact::Partition { env: &sim.dataset.env, prediction: &p.prediction }, style))
        }
        other => Err(Error::UnsupportedArtifact(other.to_string())),
    }
}
