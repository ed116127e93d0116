use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{gen_example, ProjKind, TaskSpec, TinyTransformer};

/// Mean router probabilities, one row per adapted layer, one column per head.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingHeatmap {
    pub values: Matrix,
    /// Model layer of each row.
    pub layers: Vec<usize>,
    pub source: String,
}

impl RoutingHeatmap {
    /// `layer,head,weight`, one line per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,weight\n");
        for (r, layer) in self.layers.iter().enumerate() {
            for (h, w) in self.values.row(r).iter().enumerate() {
                out.push_str(&format!("{layer},{h},{w}\n"));
            }
        }
        out
    }

    /// 8-bit binary PGM, heads wide and layers tall, white = weight 1.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (h, w) = self.values.shape();
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        out.extend(
            self.values
                .data()
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }
}

/// The first example of each task, as fed to the model.
pub fn probe_batch(tasks: &[TaskSpec]) -> Vec<Vec<usize>> {
    tasks.iter().map(|t| gen_example(t, 0).sequence().0).collect()
}

/// Gate probabilities of every Mo-SARA adapter on `kind`, from one plain
/// forward pass per probe sequence, averaged over all probe tokens.
pub fn routing_heatmap(model: &TinyTransformer, probe: &[Vec<usize>], kind: ProjKind) -> Result<RoutingHeatmap> {
    let adapters: Vec<_> = model
        .adapters()
        .into_iter()
        .filter(|(_, k, _)| *k == kind)
        .collect();
    if adapters.is_empty() || adapters.iter().any(|(_, _, a)| a.as_mosara().is_none()) {
        return Err(Error::invalid(format!("no mosara adapters on {}", kind.as_str())));
    }
    if probe.is_empty() {
        return Err(Error::invalid("empty probe batch"));
    }
    let heads = adapters[0].2.as_mosara().expect("checked").heads();
    if adapters.iter().any(|(_, _, a)| a.as_mosara().map(|m| m.heads()) != Some(heads)) {
        return Err(Error::invalid("mosara adapters disagree on head count"));
    }
    let mut sums = Matrix::zeros(adapters.len(), heads);
    let mut tokens = 0usize;
    for seq in probe {
        let inputs = model.projection_inputs(seq)?;
        tokens += seq.len();
        for (r, (layer, _, a)) in adapters.iter().enumerate() {
            let x = &inputs[*layer][usize::from(kind == ProjKind::O)];
            let gate = a.as_mosara().expect("checked").gate(x)?;
            let col = gate.col_sums();
            sums.row_mut(r).iter_mut().zip(col).for_each(|(s, c)| *s += c);
        }
    }
    Ok(RoutingHeatmap {
        values: sums.scale(1.0 / tokens as f64),
        layers: adapters.iter().map(|(l, _, _)| *l).collect(),
        source: kind.as_str().to_string(),
    })
}
