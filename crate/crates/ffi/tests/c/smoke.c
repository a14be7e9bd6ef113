#include <math.h>
#include <stdio.h>
#include <string.h>

#include "mmlab.h"

#define CHECK(call)                                                              \
    do {                                                                         \
        MmlabStatus s_ = (call);                                                 \
        if (s_ != MMLAB_STATUS_OK) {                                             \
            fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_, mmlab_last_error()); \
            return 1;                                                            \
        }                                                                        \
    } while (0)

int main(int argc, char **argv) {
    const char *dir = argc > 1 ? argv[1] : "ckpt";
    MmlabDataset *ds = NULL;
    MmlabRun *run = NULL;
    char *json = NULL;

    if (mmlab_dataset_generate("{\"n_train\": 64, \"n_val\": 32, \"n_test\": 32, \"size\": 8}",
                               MMLAB_DUPLICATE_NONE, NULL) != MMLAB_STATUS_NULL_ARGUMENT)
        return 2;
    if (mmlab_dataset_generate("{not json", MMLAB_DUPLICATE_NONE, &ds) != MMLAB_STATUS_CONFIG)
        return 3;
    if (mmlab_last_error() == NULL)
        return 4;

    CHECK(mmlab_dataset_generate("{\"n_train\": 64, \"n_val\": 32, \"n_test\": 32, \"size\": 8}",
                                 MMLAB_DUPLICATE_NONE, &ds));
    if (mmlab_dataset_len(ds, MMLAB_SPLIT_TRAIN) != 64)
        return 5;
    CHECK(mmlab_train(ds, "{\"algorithm\": \"guided\", \"epochs\": 2, \"batch_size\": 32}", &run));
    CHECK(mmlab_run_record_json(run, &json));
    if (strstr(json, "\"algorithm\":\"guided\"") == NULL)
        return 6;
    double acc = mmlab_run_test_accuracy(run);
    if (!(acc >= 0.0 && acc <= 1.0))
        return 7;
    CHECK(mmlab_run_save_checkpoint(run, dir));

    printf("mmlab %s ok acc=%.3f\n", mmlab_version(), acc);
    mmlab_string_free(json);
    mmlab_run_free(run);
    mmlab_dataset_free(ds);
    return 0;
}
