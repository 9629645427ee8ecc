use cadm_core::graph::{Graph, LayerKind};
use cadm_core::mnist::{load_mnist_idx, Dataset};
use cadm_core::{Error, Result};

use crate::DatasetArgs;

pub fn load_datasets(args: &DatasetArgs) -> Result<(Dataset, Dataset)> {
    let mut train = load_mnist_idx(&args.train_images, &args.train_labels)?;
    let test = load_mnist_idx(&args.test_images, &args.test_labels)?;
    if let Some(n) = args.limit {
        train = train.take(n);
    }
    Ok((train, test))
}

/// Declared dims of the single Input node.
pub fn graph_input_dims(g: &Graph) -> Result<Vec<usize>> {
    let id = g
        .inputs
        .first()
        .ok_or_else(|| Error::Shape("model has no input node".into()))?;
    match &g.node(*id).unwrap().kind {
        LayerKind::Input { dims } => Ok(dims.clone()),
        _ => Err(Error::Shape("input id is not an Input node".into())),
    }
}
