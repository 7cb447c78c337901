from ._ueforge import (  # noqa: F401
    DataGenConfig,
    Dataset,
    DataSplit,
    Error,
    PerturbationSet,
    StagedNet,
    diag,
    gen_data,
    load_dataset,
    load_perturbations,
    run,
    run_id,
    save_dataset,
    spec_canonical,
)
