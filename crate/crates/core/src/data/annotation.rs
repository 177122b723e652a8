//! VOC-style XML annotations.

use std::fmt::Write as _;

use super::{snap_box, PCB_CLASSES};
use crate::error::{Error, Result};
use crate::loss::GroundTruthBox;
use crate::postprocess::BBox;

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub filename: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<GroundTruthBox>,
}

/// Lowercase, with spaces and hyphens folded into underscores.
pub fn normalize_class_name(name: &str) -> String {
    name.trim()
        .chars()
        .map(|c| match c {
            ' ' | '-' => '_',
            c => c.to_ascii_lowercase(),
        })
        .collect()
}

pub fn class_id(name: &str) -> Result<usize> {
    let n = normalize_class_name(name);
    PCB_CLASSES
        .iter()
        .position(|c| *c == n)
        .ok_or_else(|| Error::UnknownClass(name.to_string()))
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, tag: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(tag))
}

fn text_of(node: roxmltree::Node<'_, '_>, tag: &str) -> Result<String> {
    child(node, tag)
        .and_then(|c| c.text())
        .map(|t| t.trim().to_string())
        .ok_or_else(|| Error::Annotation(format!("missing <{tag}>")))
}

fn number(node: roxmltree::Node<'_, '_>, tag: &str) -> Result<f64> {
    let t = text_of(node, tag)?;
    t.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Annotation(format!("<{tag}> is not a number: `{t}`")))
}

/// Parses pixel-corner boxes into normalized center form. Corners are clipped
/// to the image before conversion.
pub fn parse_annotation(xml: &str) -> Result<Annotation> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| Error::Annotation(e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(Error::Annotation(format!(
            "root element is <{}>, expected <annotation>",
            root.tag_name().name()
        )));
    }
    let filename = child(root, "filename")
        .and_then(|n| n.text())
        .unwrap_or("")
        .trim()
        .to_string();
    let size = child(root, "size").ok_or_else(|| Error::Annotation("missing <size>".into()))?;
    let (width, height) = (number(size, "width")?, number(size, "height")?);
    if width < 1.0 || height < 1.0 {
        return Err(Error::Annotation(format!("image size {width}×{height}")));
    }
    let mut boxes = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let class_id = class_id(&text_of(obj, "name")?)?;
        let bb = child(obj, "bndbox").ok_or_else(|| Error::Annotation("object without <bndbox>".into()))?;
        let (x1, y1) = (number(bb, "xmin")?, number(bb, "ymin")?);
        let (x2, y2) = (number(bb, "xmax")?, number(bb, "ymax")?);
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::Annotation(format!(
                "degenerate box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        let (x1, x2) = (x1.clamp(0.0, width), x2.clamp(0.0, width));
        let (y1, y2) = (y1.clamp(0.0, height), y2.clamp(0.0, height));
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::Annotation(format!(
                "box ({x1}, {y1}, {x2}, {y2}) lies outside the {width}×{height} image"
            )));
        }
        let bbox = BBox::from_corners(x1 / width, y1 / height, x2 / width, y2 / height);
        boxes.push(GroundTruthBox {
            bbox: snap_box(&bbox),
            class_id,
        });
    }
    Ok(Annotation {
        filename,
        width: width as usize,
        height: height as usize,
        boxes,
    })
}

/// Writes integer pixel corners, so a parse round trip is exact up to one pixel.
pub fn serialize_annotation(a: &Annotation) -> String {
    let mut s = String::from("<annotation>\n");
    let _ = writeln!(s, "  <filename>{}</filename>", a.filename);
    let _ = writeln!(
        s,
        "  <size>\n    <width>{}</width>\n    <height>{}</height>\n    <depth>3</depth>\n  </size>",
        a.width, a.height
    );
    let (w, h) = (a.width as f64, a.height as f64);
    for b in &a.boxes {
        let (x1, y1, x2, y2) = b.bbox.corners();
        let (x1, x2) = ((x1 * w).round(), (x2 * w).round().max((x1 * w).round() + 1.0));
        let (y1, y2) = ((y1 * h).round(), (y2 * h).round().max((y1 * h).round() + 1.0));
        let name = PCB_CLASSES.get(b.class_id).copied().unwrap_or("unknown");
        let _ = writeln!(
            s,
            "  <object>\n    <name>{name}</name>\n    <bndbox>\n      <xmin>{x1}</xmin>\n      <ymin>{y1}</ymin>\n      <xmax>{x2}</xmax>\n      <ymax>{y2}</ymax>\n    </bndbox>\n  </object>"
        );
    }
    s.push_str("</annotation>\n");
    s
}
