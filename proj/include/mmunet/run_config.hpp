#pragma once

#include <string>

#include "mmunet/data_io.hpp"
#include "mmunet/models.hpp"
#include "mmunet/training.hpp"

// Flat key=value run configuration. Every key has a default; unknown keys are
// rejected; dumping and re-parsing yields identical settings.
namespace mmunet::runcfg {

struct RunConfig {
    models::ModelSpec model;
    training::TrainConfig train;
    data::PhantomSpec phantom;
};

RunConfig default_config();

// '#' starts a comment line; blank lines are ignored. The single `seed` key
// feeds model init, shuffling and data generation; `input_size` sets both the
// model and the trainer.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);

std::string dump_config(const RunConfig& cfg);

}  // namespace mmunet::runcfg
