#include <stdio.h>
#include <stdlib.h>
#include "xmd.h"

int main(void) {
    XmdScene *scene = NULL;
    if (xmd_scene_generate(7, &scene) != XMD_STATUS_OK) return 1;
    size_t n = xmd_scene_num_points(scene);
    float *cloud = malloc(4 * n * sizeof(float));
    int32_t *labels = malloc(n * sizeof(int32_t));
    int32_t *pred = malloc(n * sizeof(int32_t));
    xmd_scene_copy_cloud(scene, cloud, 4 * n);
    xmd_scene_copy_point_labels(scene, labels, n);

    XmdNetwork *net = NULL;
    if (xmd_network_random(1, &net) != XMD_STATUS_OK) return 2;
    if (xmd_network_predict(net, cloud, n, pred) != XMD_STATUS_OK) return 3;
    double miou = -1.0;
    if (xmd_miou(pred, labels, n, xmd_network_num_classes(net), &miou) != XMD_STATUS_OK) return 4;

    char msg[128];
    if (xmd_scene_copy_cloud(scene, cloud, 3) != XMD_STATUS_SHAPE) return 5;
    if (xmd_last_error(msg, sizeof msg) == 0) return 6;

    printf("%s %zu %.6f\n", xmd_version(), n, miou);
    xmd_network_free(net);
    xmd_scene_free(scene);
    free(cloud);
    free(labels);
    free(pred);
    return 0;
}
