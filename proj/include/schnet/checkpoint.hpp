#pragma once

// Checkpoints are SCHT archives holding the trainable tensors, the config
// snapshot, the training iteration, the rng state and the frozen-encoder
// hash. Frozen weights are not stored; they are rebuilt from the config seed
// and verified against the stored hash on load.

#include <map>
#include <memory>
#include <string>

#include "schnet/config.hpp"
#include "schnet/model.hpp"
#include "schnet/serialize.hpp"

namespace schnet {

template <typename T>
void save_checkpoint(const std::string& path, const SchnetModel<T>& model,
                     std::uint64_t iteration, const std::string& rng_state) {
    Archive ar;
    ar.put_text("meta/config", dump_config(model.cfg()));
    ar.put_text("meta/iteration", std::to_string(iteration));
    ar.put_text("meta/rng", rng_state);
    ar.put_text("meta/frozen_hash", model.frozen_hash());
    for (const auto& p : model.params()) ar.put_tensor("params/" + p.name, p.tensor);
    ar.save(path);
}

template <typename T>
struct LoadedCheckpoint {
    std::unique_ptr<SchnetModel<T>> model;
    std::uint64_t iteration = 0;
    std::string rng_state;
    std::string frozen_hash;
};

// Rebuilds the model from the stored config and overwrites its trainables.
// Refuses to proceed when the rebuilt frozen encoders do not hash to the
// stored value (the checkpoint would not describe these encoders).
template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path, bool verify_frozen = true) {
    Archive ar = Archive::load(path);
    LoadedCheckpoint<T> out;
    RunConfig cfg = parse_config_text(ar.text("meta/config"));
    out.model = std::make_unique<SchnetModel<T>>(cfg);
    out.iteration = std::stoull(ar.text("meta/iteration"));
    out.rng_state = ar.text("meta/rng");
    out.frozen_hash = ar.text("meta/frozen_hash");
    if (verify_frozen && out.frozen_hash != out.model->frozen_hash())
        throw IoError("frozen-encoder hash mismatch: checkpoint " + out.frozen_hash +
                      " vs rebuilt " + out.model->frozen_hash());

    std::map<std::string, RawTensor> stored;
    for (const auto& [name, entry] : ar.entries()) {
        if (name.rfind("params/", 0) == 0 && entry.kind == ArchiveEntry::Kind::tensor)
            stored[name.substr(7)] = entry.tensor;
    }
    out.model->load_params(stored);
    return out;
}

}  // namespace schnet
