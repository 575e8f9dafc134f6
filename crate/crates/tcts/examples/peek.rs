// Temporary diagnostic: print greedy captions of checkpoints side by side.
use std::path::PathBuf;
use tcts::harness::{checkpoint, DataContext};
use tcts::model::greedy_decode_input;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let data = PathBuf::from(&args[0]);
    let ctx = DataContext::load(&data, 5, 16).unwrap();
    let models: Vec<(String, tcts::model::ModelParams)> = args[1..]
        .iter()
        .map(|p| {
            let (m, _) = checkpoint::load(&PathBuf::from(p)).unwrap();
            (p.clone(), m)
        })
        .collect();
    for &ri in ctx.test_idx.iter().take(8) {
        println!("record {}: objects={:?} rel={:?}", ctx.records[ri].id, ctx.records[ri].objects, ctx.records[ri].relation);
        println!("  ref0: {}", ctx.records[ri].refs[0]);
        for (name, params) in &models {
            let cap = greedy_decode_input(&ctx.inputs[ri], params, 16).unwrap();
            let words = ctx.vocab.decode(&cap).join(" ");
            println!("  {name}: {words}");
        }
    }
}
