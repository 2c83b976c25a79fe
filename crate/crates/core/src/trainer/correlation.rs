// SPDX-License-Identifier: Apache-2.0

//! Emotion × satisfaction correlation over annotated conversations.

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const SATISFACTION_LEVELS: std::ops::RangeInclusive<i64> = -3..=3;

/// Pearson correlation, or `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "pearson inputs must have equal length");
    let n = x.len() as f64;
    if x.is_empty() {
        return None;
    }
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// One of the two indicators was constant; `r` is reported as 0.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub emotions: Vec<String>,
    pub levels: Vec<i64>,
    /// `cells[emotion][level]`.
    pub cells: Vec<Vec<Correlation>>,
    pub conversations: usize,
    pub speaker: Option<String>,
}

impl CorrelationTable {
    pub fn render(&self) -> String {
        let width = self.emotions.iter().map(String::len).max().unwrap_or(7).max(7) + 2;
        let mut out = format!("{:<width$}", "emotion");
        for l in &self.levels {
            out.push_str(&format!("{l:>9}"));
        }
        out.push('\n');
        for (e, row) in self.emotions.iter().zip(&self.cells) {
            out.push_str(&format!("{e:<width$}"));
            for c in row {
                let mark = if c.degenerate { "*" } else { " " };
                out.push_str(&format!("{:>8.4}{mark}", c.r));
            }
            out.push('\n');
        }
        out.push_str("* constant indicator, r reported as 0\n");
        out
    }
}

/// For each emotion and satisfaction level: Pearson r between "the emotion
/// occurs in a message of `speaker` (any speaker when `None`)" and
/// "satisfaction equals the level", one observation per conversation.
pub fn emotion_satisfaction_correlation(corpus: &Corpus, speaker: Option<&str>) -> Result<CorrelationTable> {
    let mut sat = Vec::with_capacity(corpus.len());
    for c in &corpus.conversations {
        let s = c
            .meta
            .as_ref()
            .and_then(|m| m.satisfaction)
            .ok_or_else(|| Error::Config(format!("conversation {} has no satisfaction score", c.id)))?;
        if !SATISFACTION_LEVELS.contains(&s) {
            return Err(Error::Config(format!("conversation {}: satisfaction {s} outside -3..=3", c.id)));
        }
        sat.push(s);
    }
    let emotions = corpus.label_set().to_vec();
    let levels: Vec<i64> = SATISFACTION_LEVELS.collect();
    let cells = emotions
        .iter()
        .map(|e| {
            let x: Vec<f64> = corpus
                .conversations
                .iter()
                .map(|c| {
                    let hit = c
                        .messages
                        .iter()
                        .any(|m| &m.label == e && speaker.is_none_or(|s| m.speaker == s));
                    f64::from(u8::from(hit))
                })
                .collect();
            levels
                .iter()
                .map(|&l| {
                    let y: Vec<f64> = sat.iter().map(|&s| f64::from(u8::from(s == l))).collect();
                    match pearson(&x, &y) {
                        Some(r) => Correlation { r, degenerate: false },
                        None => Correlation {
                            r: 0.0,
                            degenerate: true,
                        },
                    }
                })
                .collect()
        })
        .collect();
    Ok(CorrelationTable {
        emotions,
        levels,
        cells,
        conversations: corpus.len(),
        speaker: speaker.map(String::from),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Conversation, Message, Meta, Split};

    #[test]
    fn pearson_examples() {
        let r = pearson(&[1.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((r - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert!((pearson(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 0.0, 1.0, 0.0], &[0.0, 1.0, 0.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }

    fn conv(id: &str, labels: &[(&str, &str)], sat: Option<i64>) -> Conversation {
        Conversation {
            id: id.into(),
            messages: labels.iter().map(|(s, l)| Message::new(*s, "hi", *l)).collect(),
            meta: Some(Meta {
                satisfaction: sat,
                extra: Default::default(),
            }),
        }
    }

    #[test]
    fn visitor_filter_and_flags() {
        let corpus = Corpus::new(
            Split::Test,
            vec![
                conv("a", &[("visitor", "anger"), ("agent", "joy")], Some(-3)),
                conv("b", &[("visitor", "joy"), ("agent", "anger")], Some(3)),
            ],
        )
        .unwrap();
        let t = emotion_satisfaction_correlation(&corpus, Some("visitor")).unwrap();
        let anger = t.emotions.iter().position(|e| e == "anger").unwrap();
        assert!((t.cells[anger][0].r - 1.0).abs() < 1e-12);
        assert!((t.cells[anger][6].r + 1.0).abs() < 1e-12);
        assert!(t.cells[anger][3].degenerate);
        let all = emotion_satisfaction_correlation(&corpus, None).unwrap();
        assert!(all.cells[anger][0].degenerate);
    }

    #[test]
    fn missing_satisfaction_is_an_error() {
        let corpus = Corpus::new(Split::Test, vec![conv("a", &[("visitor", "joy")], None)]).unwrap();
        assert!(emotion_satisfaction_correlation(&corpus, None).is_err());
    }
}
