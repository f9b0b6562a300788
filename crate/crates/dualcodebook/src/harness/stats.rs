//! Codebook statistics: per-dimension value histograms for each quantization
//! site, their total-variation distance, usage counters, and CSV/SVG exports.

use crate::error::{Error, Result};
use crate::model::Model;

/// Histogram resolution per dimension.
pub const STATS_BINS: usize = 32;

/// One site's histogram over a shared bin range.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SiteHistogram {
    pub site: String,
    pub counts: Vec<u64>,
}

/// Histograms of one code dimension across the active sites.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DimStats {
    pub dim: usize,
    pub lo: f64,
    pub hi: f64,
    pub sites: Vec<SiteHistogram>,
    /// Total-variation distance between the two sites' normalized
    /// histograms; absent unless both sites are active.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tv: Option<f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SiteUsage {
    pub site: String,
    pub counts: Vec<u64>,
    pub dead_fraction: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CodebookStats {
    pub bins: usize,
    pub codebook_size: usize,
    /// Whether both sites resolve to one shared codebook object.
    pub shared: bool,
    pub dims: Vec<DimStats>,
    pub usage: Vec<SiteUsage>,
}

fn usage_of(site: &str, counts: &[u64]) -> SiteUsage {
    let dead = counts.iter().filter(|&&c| c == 0).count();
    SiteUsage {
        site: site.to_string(),
        counts: counts.to_vec(),
        dead_fraction: if counts.is_empty() {
            0.0
        } else {
            dead as f64 / counts.len() as f64
        },
    }
}

/// Collects histograms over the selected code dimensions.
pub fn codebook_stats(model: &Model, dims: &[usize]) -> Result<CodebookStats> {
    let cfg = model.config();
    let mut sites: Vec<(&str, usize)> = Vec::new();
    if let Some(pos) = model.encoder_codebook_position() {
        sites.push(("encoder", pos));
    }
    if let Some(pos) = model.decoder_codebook_position() {
        sites.push(("decoder", pos));
    }
    if sites.is_empty() {
        return Err(Error::config(
            "this configuration has no codebooks; nothing to report".to_string(),
        ));
    }
    if dims.is_empty() {
        return Err(Error::config("no dimensions selected".to_string()));
    }
    for &d in dims {
        if d >= cfg.code_dim {
            return Err(Error::config(format!(
                "dimension {d} out of range for code_dim {}",
                cfg.code_dim
            )));
        }
    }

    let mut out_dims = Vec::with_capacity(dims.len());
    for &d in dims {
        // Shared bin range across the sites so histograms are comparable.
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &(_, pos) in &sites {
            let t = model.params().tensor_at(pos);
            for k in 0..t.rows() {
                let v = t.row(k)[d];
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if lo == hi {
            lo -= 0.5;
            hi += 0.5;
        }
        let width = hi - lo;

        let mut hists = Vec::with_capacity(sites.len());
        for &(name, pos) in &sites {
            let t = model.params().tensor_at(pos);
            let mut counts = vec![0u64; STATS_BINS];
            for k in 0..t.rows() {
                let v = t.row(k)[d];
                let bin = (((v - lo) / width) * STATS_BINS as f64) as usize;
                counts[bin.min(STATS_BINS - 1)] += 1;
            }
            hists.push(SiteHistogram { site: name.to_string(), counts });
        }
        let tv = if hists.len() == 2 {
            let n = cfg.codebook_size as f64;
            let sum: f64 = hists[0]
                .counts
                .iter()
                .zip(&hists[1].counts)
                .map(|(&a, &b)| (a as f64 / n - b as f64 / n).abs())
                .sum();
            Some(0.5 * sum)
        } else {
            None
        };
        out_dims.push(DimStats { dim: d, lo, hi, sites: hists, tv });
    }

    let mut usage = Vec::new();
    if model.encoder_codebook_position().is_some() {
        usage.push(usage_of("encoder", model.usage_encoder()));
    }
    if model.decoder_codebook_position().is_some() {
        usage.push(usage_of("decoder", model.usage_decoder()));
    }
    Ok(CodebookStats {
        bins: STATS_BINS,
        codebook_size: cfg.codebook_size,
        shared: cfg.shared_codebook,
        dims: out_dims,
        usage,
    })
}

/// CSV rendering: one row per site, dimension, and bin.
pub fn stats_csv(stats: &CodebookStats) -> String {
    let mut out = String::from("site,dim,bin,lo,hi,count,freq\n");
    let k = stats.codebook_size as f64;
    for d in &stats.dims {
        let width = (d.hi - d.lo) / stats.bins as f64;
        for site in &d.sites {
            for (b, &count) in site.counts.iter().enumerate() {
                let bin_lo = d.lo + b as f64 * width;
                let bin_hi = d.lo + (b + 1) as f64 * width;
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    site.site,
                    d.dim,
                    b,
                    bin_lo,
                    bin_hi,
                    count,
                    count as f64 / k
                ));
            }
        }
    }
    out
}

const SVG_COLORS: [(&str, &str); 2] = [("encoder", "#2b6cb0"), ("decoder", "#c53030")];

fn site_color(site: &str) -> &'static str {
    SVG_COLORS
        .iter()
        .find(|(name, _)| *name == site)
        .map(|(_, c)| *c)
        .unwrap_or("#444444")
}

/// SVG rendering: one panel per dimension with the sites' frequency
/// polylines overlaid.
pub fn stats_svg(stats: &CodebookStats) -> String {
    let (width, panel_h, margin, plot_h) = (720.0, 150.0, 45.0, 100.0);
    let height = margin + stats.dims.len() as f64 * panel_h;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"monospace\" font-size=\"12\">\n"
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (li, (name, color)) in SVG_COLORS.iter().enumerate() {
        let x = 60.0 + li as f64 * 140.0;
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"12\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"22\">{name}</text>\n",
            x + 18.0
        ));
    }
    for (pi, d) in stats.dims.iter().enumerate() {
        let top = margin + pi as f64 * panel_h;
        let base = top + plot_h;
        let label = match d.tv {
            Some(tv) => format!("dim {} (tv {:.4})", d.dim, tv),
            None => format!("dim {}", d.dim),
        };
        svg.push_str(&format!("<text x=\"60\" y=\"{}\">{label}</text>\n", top + 14.0));
        svg.push_str(&format!(
            "<line x1=\"60\" y1=\"{base}\" x2=\"700\" y2=\"{base}\" stroke=\"#999\"/>\n"
        ));
        let max_count = d
            .sites
            .iter()
            .flat_map(|s| s.counts.iter())
            .copied()
            .max()
            .unwrap_or(1)
            .max(1) as f64;
        for site in &d.sites {
            let points: Vec<String> = site
                .counts
                .iter()
                .enumerate()
                .map(|(b, &c)| {
                    let x = 60.0 + (b as f64 + 0.5) / stats.bins as f64 * 640.0;
                    let y = base - (c as f64 / max_count) * (plot_h - 20.0);
                    format!("{x:.1},{y:.1}")
                })
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                site_color(&site.site),
                points.join(" ")
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}
