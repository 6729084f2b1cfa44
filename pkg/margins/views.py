from django.http import JsonResponse
from django.shortcuts import get_object_or_404
from django.views.decorators.http import require_GET
from .models import AssessmentRun
import logging

logger = logging.getLogger(__name__)

RECENT_RUNS = 10

@require_GET
def run_list(request):
    runs = AssessmentRun.objects.order_by('-created_at')[:RECENT_RUNS]
    return JsonResponse({'runs': [run.as_dict() for run in runs]})

@require_GET
def run_detail(request, pk):
    run = get_object_or_404(AssessmentRun, pk=pk)
    logger.debug(f'Run {pk} requested')
    return JsonResponse(run.as_dict())
