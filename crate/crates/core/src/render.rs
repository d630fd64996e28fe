//! Static SVG rendering of scenes: one oriented box per rendered step with a
//! temporal color gradient per agent role, over the roadgraph.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::{OrientedBox, Point};
use crate::scene::{AgentType, RawScene};
use crate::world::RoadGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Environment,
    Av,
    Injected,
}

impl Role {
    /// Start and end colors of the temporal gradient.
    fn gradient(self) -> ([u8; 3], [u8; 3]) {
        match self {
            Role::Environment => ([46, 160, 67], [31, 94, 214]),
            Role::Av => ([245, 130, 32], [250, 215, 40]),
            Role::Injected => ([220, 38, 38], [126, 34, 206]),
        }
    }

    fn color(self, u: f64) -> String {
        let (a, b) = self.gradient();
        let mix = |i: usize| (a[i] as f64 + (b[i] as f64 - a[i] as f64) * u.clamp(0.0, 1.0)).round() as u8;
        format!("#{:02x}{:02x}{:02x}", mix(0), mix(1), mix(2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    /// `(min_x, min_y, max_x, max_y)` in meters; `None` fits the content.
    pub viewport: Option<[f64; 4]>,
    /// Pixels per meter.
    pub scale: f64,
    /// Render every `stride`-th step.
    pub stride: usize,
    /// Agent indices drawn with the injected-agent palette.
    pub injected: Vec<usize>,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            viewport: None,
            scale: 4.0,
            stride: 1,
            injected: Vec::new(),
        }
    }
}

fn fit(scene: &RawScene, road: &RoadGraph) -> [f64; 4] {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    let mut add = |p: Point| {
        b[0] = b[0].min(p[0]);
        b[1] = b[1].min(p[1]);
        b[2] = b[2].max(p[0]);
        b[3] = b[3].max(p[1]);
    };
    let mut any_agent = false;
    for t in &scene.agents {
        for s in t.states.iter().filter(|s| s.valid) {
            add([s.x, s.y]);
            any_agent = true;
        }
    }
    if !any_agent {
        for p in road.polygons.iter().flatten() {
            add(*p);
        }
    }
    if !b[0].is_finite() {
        return [-50.0, -50.0, 50.0, 50.0];
    }
    let m = 15.0;
    [b[0] - m, b[1] - m, b[2] + m, b[3] + m]
}

/// Self-contained SVG document. The y axis points up in world units.
pub fn render_scene(scene: &RawScene, road: &RoadGraph, spec: &RenderSpec) -> String {
    let vp = spec.viewport.unwrap_or_else(|| fit(scene, road));
    let k = spec.scale;
    let (w, h) = ((vp[2] - vp[0]) * k, (vp[3] - vp[1]) * k);
    let px = |p: Point| ((p[0] - vp[0]) * k, (vp[3] - p[1]) * k);
    let path = |pts: &[Point]| {
        let mut d = String::new();
        for (i, p) in pts.iter().enumerate() {
            let (x, y) = px(*p);
            let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, x, y);
        }
        d.trim_end().to_string()
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.2} {h:.2}\">"
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"#f4f4f0\"/>");
    let _ = writeln!(out, "<g id=\"road\">");
    for poly in &road.polygons {
        let _ = writeln!(out, "<path class=\"drivable\" d=\"{} Z\" fill=\"#d8d8d8\" stroke=\"#555\" stroke-width=\"1\"/>", path(poly));
    }
    for lane in &road.lanes {
        let _ = writeln!(
            out,
            "<path class=\"lane\" d=\"{}\" fill=\"none\" stroke=\"#999\" stroke-width=\"0.8\" stroke-dasharray=\"6 4\"/>",
            path(&lane.centerline)
        );
    }
    let _ = writeln!(out, "</g>");
    let stride = spec.stride.max(1);
    let steps = scene.steps();
    for (a, track) in scene.agents.iter().enumerate() {
        let role = if spec.injected.contains(&a) {
            Role::Injected
        } else if track.kind == AgentType::Av {
            Role::Av
        } else {
            Role::Environment
        };
        let _ = writeln!(out, "<g class=\"agent\" id=\"agent-{a}\">");
        for (s, st) in track.states.iter().enumerate().step_by(stride) {
            if !st.valid {
                continue;
            }
            let u = if steps > 1 { s as f64 / (steps - 1) as f64 } else { 0.0 };
            let corners = OrientedBox::new([st.x, st.y], st.heading, track.length, track.width).corners();
            let _ = writeln!(
                out,
                "<path class=\"box\" d=\"{} Z\" fill=\"{}\" fill-opacity=\"0.55\" stroke=\"none\"/>",
                path(&corners),
                role.color(u)
            );
        }
        let _ = writeln!(out, "</g>");
    }
    out.push_str("</svg>\n");
    out
}
