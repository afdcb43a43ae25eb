//! Partition a dataset into blocks and groups, print the pair plan and
//! replay the residency state machine for one worker.

use cashash::scheduler::{
    plan_exhaustive, simulate, step_residency, Partition, ResidencyState, WorkSequence,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let p = Partition::new(10, 2, 2)?;
    println!("layout: {:?}", p.layout());
    let plan = plan_exhaustive(&p);
    for t in &plan.tasks {
        println!("G{}-G{} B{}-B{}: {:?}", t.groups.0, t.groups.1, t.blocks.0, t.blocks.1, t.pairs);
    }

    let seq = WorkSequence::matching(&p, &plan.tasks);
    let mut state = ResidencyState::new();
    while let Some(step) = step_residency(&state, &seq) {
        let (next, actions) = step?;
        println!("{actions:?}  memory {:?} device {:?}", next.memory, next.device);
        state = next;
    }

    let trace = simulate(&seq)?;
    println!(
        "loads {} max resident groups {} blocks {} stalls {}",
        trace.loads(),
        trace.max_memory,
        trace.max_device,
        trace.stalls.len()
    );
    Ok(())
}
