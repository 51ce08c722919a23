//! Trains the default configuration with and without counterfactuals and
//! prints the evaluation reports next to the untrained baseline.

use std::time::Instant;

use procshift::config::Config;
use procshift::eval::{evaluate, ReportIds};
use procshift::trainer::{init_model, text_table, Trainer};
use procshift::world::World;

fn main() -> procshift::Result<()> {
    let config = Config::default();
    let world = World::new(config.world.clone(), config.seed)?;
    let t = Instant::now();
    let data = world.generate(config.seed)?;
    eprintln!("generated in {:.1?}", t.elapsed());
    let text = text_table(&config)?;
    let ids = ReportIds {
        dataset: "default".into(),
        model: "-".into(),
    };
    let untrained = init_model(&config)?;
    let r = evaluate(
        &config,
        &world,
        &untrained,
        &text,
        &data.train,
        &data.val,
        &data.test,
        &ids,
    )?;
    println!("untrained\n{}", r.to_text());
    for ablate in [false, true] {
        let mut c = config.clone();
        c.train.ablate_cf = ablate;
        let t = Instant::now();
        let mut tr = Trainer::new(c.clone(), &data.train)?;
        tr.run()?;
        eprintln!("trained (ablate={ablate}) in {:.1?}", t.elapsed());
        let r = evaluate(&c, &world, tr.model(), &text, &data.train, &data.val, &data.test, &ids)?;
        println!("ablate_cf={ablate}\n{}", r.to_text());
    }
    Ok(())
}
