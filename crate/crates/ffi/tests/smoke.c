#include <stdio.h>

#include "vrel.h"

int main(int argc, char **argv) {
    if (argc != 3) {
        fprintf(stderr, "usage: smoke CHECKPOINT DATASET\n");
        return 2;
    }
    VrelModel *model = NULL;
    VrelDataset *data = NULL;
    if (vrel_model_load(argv[1], &model) != VREL_STATUS_OK) {
        fprintf(stderr, "model: %s\n", vrel_last_error());
        return 1;
    }
    if (vrel_dataset_load(argv[2], &data) != VREL_STATUS_OK) {
        fprintf(stderr, "dataset: %s\n", vrel_last_error());
        vrel_model_free(model);
        return 1;
    }
    VrelModelInfo info;
    vrel_model_info(model, &info);
    double score = 0.0;
    VrelStatus st = vrel_evaluate(model, data, 1, 50, &score);
    if (st == VREL_STATUS_OK) {
        printf("vrel %s: %zu params, %zu classes, recall@50 %.4f\n", vrel_version(), info.total_params,
               info.num_classes, score);
    }
    VrelModel *missing = NULL;
    if (vrel_model_load("/nonexistent/checkpoint", &missing) == VREL_STATUS_OK || vrel_last_error() == NULL) {
        st = VREL_STATUS_PANIC;
    }
    vrel_dataset_free(data);
    vrel_model_free(model);
    return st == VREL_STATUS_OK ? 0 : 1;
}
