use std::io::{self, Write};

use super::ForwardTrace;
use crate::tensor::Scalar;

/// `layer,pos,hard,soft`, one row per layer and window position.
pub fn write_routes_csv<T: Scalar, W: Write>(mut w: W, trace: &ForwardTrace<T>) -> io::Result<()> {
    writeln!(w, "layer,pos,hard,soft")?;
    for route in &trace.routes {
        for (pos, (h, s)) in route.hard.iter().zip(&route.soft).enumerate() {
            writeln!(w, "{},{pos},{},{}", route.layer + 1, h, s)?;
        }
    }
    Ok(())
}

/// `layer,head,query_pos,key_pos,weight` over the causal (lower) triangle of
/// the valid block.
pub fn write_attention_csv<T: Scalar, W: Write>(mut w: W, trace: &ForwardTrace<T>) -> io::Result<()> {
    writeln!(w, "layer,head,query_pos,key_pos,weight")?;
    let big = trace.states.shape()[0];
    for (l, heads) in trace.attention.iter().enumerate() {
        for (m, a) in heads.iter().enumerate() {
            for q in trace.offset..big {
                for k in trace.offset..=q {
                    writeln!(w, "{},{},{q},{k},{}", l + 1, m + 1, a.at2(q, k))?;
                }
            }
        }
    }
    Ok(())
}
